//! Likelihood-ratio models and sequential detectors.
//!
//! A [`LikelihoodRatioModel`] maps a scalar observation to a log-likelihood
//! ratio. [`CusumState`] accumulates those ratios with the recursion
//! `S_t = max(S_{t-1}, 0) + llr(x_t)` and alarms once `S_t ≥ b`. [`GlrState`] keeps
//! the last `W` raw observations and maximizes over both the change time and
//! an unknown Gaussian mean shift.
//!
//! Detectors are streaming state machines: the decision at time `t` only
//! sees `x_1..x_t`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::lfd::{log_sum_exp, LfdSolution, LLR_CLAMP};

/// Masses below this are raised to it before a binned vector is normalized.
pub const BIN_FLOOR: f64 = 1e-6;

/// `log dN(m,1)/dN(0,1)` at `x`.
pub fn llr_gaussian_mean(x: f64, m: f64) -> f64 {
    m * x - 0.5 * m * m
}

/// LFDs on the real line convolved with a Gaussian kernel of bandwidth `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SmoothedLfd {
    pub support: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
    pub h: f64,
}

impl SmoothedLfd {
    pub fn new(support: Vec<f64>, p1: Vec<f64>, p2: Vec<f64>, h: f64) -> Result<Self> {
        let model = SmoothedLfd { support, p1, p2, h };
        model.validate()?;
        Ok(model)
    }

    /// Smooths a solved LFD pair. Only one-dimensional supports are accepted.
    pub fn from_solution(solution: &LfdSolution, h: f64) -> Result<Self> {
        if solution.dim() != 1 {
            return Err(Error::invalid(format!(
                "kernel smoothing needs a one-dimensional support, got dimension {}",
                solution.dim()
            )));
        }
        let support = solution.support.iter().map(|p| p.coords()[0]).collect();
        SmoothedLfd::new(support, solution.p1.clone(), solution.p2.clone(), h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {}", self.h)));
        }
        let n = self.support.len();
        if n == 0 || self.p1.len() != n || self.p2.len() != n {
            return Err(Error::invalid("smoothed LFD needs matching nonempty support and masses"));
        }
        let ok = |v: &[f64]| v.iter().all(|w| *w >= 0.0 && w.is_finite()) && v.iter().sum::<f64>() > 0.0;
        if !self.support.iter().all(|z| z.is_finite()) || !ok(&self.p1) || !ok(&self.p2) {
            return Err(Error::invalid("smoothed LFD masses must be finite, nonnegative and not all zero"));
        }
        Ok(())
    }

    /// Log of the smoothed density of `masses` at `x`, dropping the kernel's
    /// normalizing constant (it cancels in the ratio).
    fn log_mixture(&self, masses: &[f64], x: f64) -> f64 {
        let s = 2.0 * self.h * self.h;
        let terms: Vec<f64> = self
            .support
            .iter()
            .zip(masses)
            .filter(|(_, w)| **w > 0.0)
            .map(|(z, w)| w.ln() - (x - z) * (x - z) / s)
            .collect();
        log_sum_exp(&terms)
    }
}

/// `log(Σ p2_l K_h(x, z_l)) − log(Σ p1_l K_h(x, z_l))`, clamped.
pub fn llr_smoothed(model: &SmoothedLfd, x: f64) -> f64 {
    let v = model.log_mixture(&model.p2, x) - model.log_mixture(&model.p1, x);
    if v.is_nan() {
        return 0.0;
    }
    v.clamp(-LLR_CLAMP, LLR_CLAMP)
}

/// Piecewise-constant log ratio over the bins `(-∞,e_1], (e_1,e_2], …, (e_{L-1},∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BinnedTable {
    pub edges: Vec<f64>,
    pub log_ratio: Vec<f64>,
}

impl BinnedTable {
    pub fn new(edges: Vec<f64>, log_ratio: Vec<f64>) -> Result<Self> {
        let table = BinnedTable { edges, log_ratio };
        table.validate()?;
        Ok(table)
    }

    /// Table of clamped `log(q2/q1)` for two bin-mass vectors.
    pub fn from_masses(edges: Vec<f64>, q1: &[f64], q2: &[f64]) -> Result<Self> {
        if q1.len() != q2.len() {
            return Err(Error::invalid("bin mass vectors differ in length"));
        }
        let log_ratio = q2
            .iter()
            .zip(q1)
            .map(|(&b, &a)| crate::lfd::clamped_log_ratio(b, a))
            .collect::<Result<Vec<_>>>()?;
        BinnedTable::new(edges, log_ratio)
    }

    pub fn bins(&self) -> usize {
        self.log_ratio.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_edges(&self.edges)?;
        if self.log_ratio.len() != self.edges.len() + 1 {
            return Err(Error::invalid(format!(
                "{} edges need {} log ratios, got {}",
                self.edges.len(),
                self.edges.len() + 1,
                self.log_ratio.len()
            )));
        }
        if !self.log_ratio.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("binned log ratios must be finite"));
        }
        Ok(())
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if !edges.iter().all(|e| e.is_finite()) {
        return Err(Error::invalid("bin edges must be finite"));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    Ok(())
}

/// Index of the bin holding `x`; a point on an edge belongs to the lower bin.
pub fn bin_index(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|e| *e < x)
}

pub fn llr_binned(table: &BinnedTable, x: f64) -> f64 {
    table.log_ratio[bin_index(&table.edges, x)]
}

/// Interior `i/L` quantiles of a sample, `i = 1..L-1`, by linear interpolation
/// between order statistics.
pub fn bin_edges_empirical(samples: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
    }
    if samples.len() < bins {
        return Err(Error::invalid(format!(
            "{} samples cannot define {bins} bins",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("samples must be finite"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (1..bins)
        .map(|i| {
            let h = (n - 1) as f64 * i as f64 / bins as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        })
        .collect();
    check_edges(&edges).map_err(|_| Error::invalid("samples have too many ties for distinct bin edges"))?;
    Ok(edges)
}

/// Interior `i/L` quantiles of `N(mean, std²)`.
pub fn bin_edges_normal(mean: f64, std: f64, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((1..bins).map(|i| dist.inverse_cdf(i as f64 / bins as f64)).collect())
}

/// Raw mass per bin of a weighted point set.
pub fn bin_masses(points: &[f64], weights: &[f64], edges: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; edges.len() + 1];
    for (x, w) in points.iter().zip(weights) {
        out[bin_index(edges, *x)] += w;
    }
    out
}

/// Bin masses raised to [`BIN_FLOOR`] and renormalized.
pub fn floor_masses(masses: &[f64]) -> Vec<f64> {
    let floored: Vec<f64> = masses.iter().map(|m| m.max(BIN_FLOOR)).collect();
    let total: f64 = floored.iter().sum();
    floored.into_iter().map(|m| m / total).collect()
}

/// Floored bin distribution of an equally weighted sample.
pub fn binned_distribution(samples: &[f64], edges: &[f64]) -> Vec<f64> {
    let w = vec![1.0 / samples.len() as f64; samples.len()];
    floor_masses(&bin_masses(samples, &w, edges))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum LikelihoodRatioModel {
    GaussianExact { m: f64 },
    SmoothedLfd(SmoothedLfd),
    BinnedTable(BinnedTable),
}

impl LikelihoodRatioModel {
    pub fn llr(&self, x: f64) -> f64 {
        match self {
            LikelihoodRatioModel::GaussianExact { m } => llr_gaussian_mean(x, *m),
            LikelihoodRatioModel::SmoothedLfd(s) => llr_smoothed(s, x),
            LikelihoodRatioModel::BinnedTable(t) => llr_binned(t, x),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LikelihoodRatioModel::GaussianExact { m } if !m.is_finite() => {
                Err(Error::invalid("Gaussian mean shift must be finite"))
            }
            LikelihoodRatioModel::GaussianExact { .. } => Ok(()),
            LikelihoodRatioModel::SmoothedLfd(s) => s.validate(),
            LikelihoodRatioModel::BinnedTable(t) => t.validate(),
        }
    }
}

/// A smooth log ratio sampled on a uniform grid and linearly interpolated.
/// Points off the grid fall back to the exact model.
#[derive(Clone, Debug)]
pub struct TabulatedLlr {
    model: LikelihoodRatioModel,
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl TabulatedLlr {
    pub fn new(model: LikelihoodRatioModel, lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(lo < hi && step > 0.0 && lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid("tabulation needs lo < hi and a positive step"));
        }
        let n = ((hi - lo) / step).ceil() as usize + 1;
        let values = (0..n).map(|i| model.llr(lo + i as f64 * step)).collect();
        Ok(TabulatedLlr { model, lo, step, values })
    }

    pub fn llr(&self, x: f64) -> f64 {
        let u = (x - self.lo) / self.step;
        if u >= 0.0 && u < (self.values.len() - 1) as f64 {
            let i = u as usize;
            let f = u - i as f64;
            self.values[i] + f * (self.values[i + 1] - self.values[i])
        } else {
            self.model.llr(x)
        }
    }
}

/// Page's recursion state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CusumState {
    pub statistic: f64,
    pub threshold: f64,
    pub time: u64,
    pub stopped: bool,
}

impl CusumState {
    pub fn new(threshold: f64) -> Self {
        CusumState {
            statistic: 0.0,
            threshold,
            time: 0,
            stopped: false,
        }
    }

    /// Feeds one log ratio; returns whether the detector has stopped.
    pub fn update(&mut self, llr: f64) -> Result<bool> {
        if self.stopped {
            return Err(Error::Usage(format!("CUSUM already stopped at time {}", self.time)));
        }
        self.statistic = self.statistic.max(0.0) + llr;
        self.time += 1;
        self.stopped = self.statistic >= self.threshold;
        Ok(self.stopped)
    }
}

/// `cusum_update` as a pure function.
pub fn cusum_update(state: &CusumState, llr: f64) -> Result<CusumState> {
    let mut next = state.clone();
    next.update(llr)?;
    Ok(next)
}

/// Window-limited GLR state for a Gaussian mean shift from `N(0,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlrState {
    window: VecDeque<f64>,
    capacity: usize,
    pub threshold: f64,
    pub time: u64,
    pub stopped: bool,
    statistic: f64,
}

impl GlrState {
    pub fn new(window: usize, threshold: f64) -> Result<Self> {
        if window == 0 {
            return Err(Error::invalid("GLR window must be at least 1"));
        }
        Ok(GlrState {
            window: VecDeque::with_capacity(window),
            capacity: window,
            threshold,
            time: 0,
            stopped: false,
            statistic: 0.0,
        })
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }

    pub fn statistic(&self) -> f64 {
        self.statistic
    }

    pub fn update(&mut self, x: f64) -> Result<bool> {
        if self.stopped {
            return Err(Error::Usage(format!("GLR already stopped at time {}", self.time)));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(x);
        self.time += 1;
        self.statistic = glr_statistic(self.window.iter().copied().rev());
        self.stopped = self.statistic >= self.threshold;
        Ok(self.stopped)
    }
}

/// `max_k (Σ_{i=k}^t x_i)² / (2(t−k+1))` over the given observations, passed
/// newest first.
pub fn glr_statistic(newest_first: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut best = 0.0f64;
    for (j, x) in newest_first.enumerate() {
        sum += x;
        best = best.max(sum * sum / (2.0 * (j + 1) as f64));
    }
    best
}

/// Detector configuration, independent of any stream.
#[derive(Clone, Debug, PartialEq)]
pub enum Detector {
    Cusum { model: LikelihoodRatioModel, threshold: f64 },
    Glr { window: usize, threshold: f64 },
}

/// A running detector fed one observation at a time.
#[derive(Clone, Debug)]
pub enum OnlineDetector<'a> {
    Cusum { model: &'a LikelihoodRatioModel, state: CusumState },
    Glr(GlrState),
}

impl Detector {
    pub fn start(&self) -> Result<OnlineDetector<'_>> {
        match self {
            Detector::Cusum { model, threshold } => {
                model.validate()?;
                Ok(OnlineDetector::Cusum {
                    model,
                    state: CusumState::new(*threshold),
                })
            }
            Detector::Glr { window, threshold } => Ok(OnlineDetector::Glr(GlrState::new(*window, *threshold)?)),
        }
    }
}

impl OnlineDetector<'_> {
    pub fn observe(&mut self, x: f64) -> Result<bool> {
        match self {
            OnlineDetector::Cusum { model, state } => state.update(model.llr(x)),
            OnlineDetector::Glr(g) => g.update(x),
        }
    }

    pub fn statistic(&self) -> f64 {
        match self {
            OnlineDetector::Cusum { state, .. } => state.statistic,
            OnlineDetector::Glr(g) => g.statistic(),
        }
    }

    pub fn time(&self) -> u64 {
        match self {
            OnlineDetector::Cusum { state, .. } => state.time,
            OnlineDetector::Glr(g) => g.time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoppingDecision {
    pub stopped_at: Option<u64>,
    pub final_statistic: f64,
    pub truncated: bool,
}

/// Runs a detector over at most `horizon` observations of `stream`.
pub fn run_detector(
    detector: &Detector,
    stream: impl IntoIterator<Item = f64>,
    horizon: u64,
) -> Result<StoppingDecision> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let mut online = detector.start()?;
    for x in stream.into_iter().take(horizon as usize) {
        if online.observe(x)? {
            return Ok(StoppingDecision {
                stopped_at: Some(online.time()),
                final_statistic: online.statistic(),
                truncated: false,
            });
        }
    }
    Ok(StoppingDecision {
        stopped_at: None,
        final_statistic: online.statistic(),
        truncated: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_llr_examples() {
        assert_eq!(llr_gaussian_mean(0.5, 1.0), 0.0);
        assert_eq!(llr_gaussian_mean(1.0, 1.0), 0.5);
        assert_eq!(llr_gaussian_mean(0.0, 1.0), -0.5);
    }

    #[test]
    fn smoothed_two_diracs_is_linear() {
        let m = SmoothedLfd::new(vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0], 0.5).unwrap();
        for x in [-1.0, 0.0, 0.5, 0.8, 2.0] {
            assert_abs_diff_eq!(llr_smoothed(&m, x), (2.0 * x - 1.0) / (2.0 * 0.25), epsilon = 1e-12);
        }
        assert_abs_diff_eq!(llr_smoothed(&m, 100.0), LLR_CLAMP);
    }

    #[test]
    fn smoothed_equal_masses_vanish() {
        let m = SmoothedLfd::new(vec![-1.0, 0.3, 2.0], vec![0.2, 0.5, 0.3], vec![0.2, 0.5, 0.3], 0.25).unwrap();
        for x in [-50.0, -1.0, 0.0, 7.0, 60.0] {
            assert_eq!(llr_smoothed(&m, x), 0.0);
        }
    }

    #[test]
    fn smoothed_rejects_bad_bandwidth() {
        assert!(SmoothedLfd::new(vec![0.0], vec![1.0], vec![1.0], 0.0).is_err());
        assert!(SmoothedLfd::new(vec![0.0], vec![1.0], vec![1.0], f64::NAN).is_err());
    }

    #[test]
    fn normal_edges() {
        let e = bin_edges_normal(0.0, 1.0, 4).unwrap();
        assert_abs_diff_eq!(e[0], -0.6744897501960817, epsilon = 1e-9);
        assert_abs_diff_eq!(e[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e[2], 0.6744897501960817, epsilon = 1e-9);
        assert_eq!(bin_edges_normal(0.0, 1.0, 2).unwrap().len(), 1);
    }

    #[test]
    fn empirical_edges_interpolate() {
        assert_eq!(bin_edges_empirical(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![2.5]);
        assert_eq!(bin_edges_empirical(&[4.0, 1.0, 3.0, 2.0], 4).unwrap(), vec![1.75, 2.5, 3.25]);
        assert!(bin_edges_empirical(&[1.0, 2.0, 3.0], 4).is_err());
        assert!(bin_edges_empirical(&[1.0, 2.0], 1).is_err());
        assert!(bin_edges_empirical(&[1.0, 1.0, 1.0, 1.0], 3).is_err());
    }

    #[test]
    fn bins_close_on_the_right() {
        let edges = [-1.0, 1.0];
        assert_eq!(bin_masses(&[0.0], &[1.0], &edges), vec![0.0, 1.0, 0.0]);
        assert_eq!(bin_index(&edges, -1.0), 0);
        assert_eq!(bin_index(&edges, -1.0 + 1e-12), 1);
        assert_eq!(bin_index(&edges, 1.0), 1);
        assert_eq!(bin_index(&edges, 5.0), 2);
        let t = BinnedTable::new(edges.to_vec(), vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(llr_binned(&t, -7.0), -2.0);
        assert_eq!(llr_binned(&t, 1.0), 0.0);
    }

    #[test]
    fn floored_masses_sum_to_one() {
        let q = floor_masses(&[0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(q.iter().all(|v| *v >= BIN_FLOOR * 0.99));
        let samples = [1.0, 2.0, 3.0, 4.0];
        let e = bin_edges_empirical(&samples, 2).unwrap();
        assert_eq!(binned_distribution(&samples, &e), vec![0.5, 0.5]);
    }

    #[test]
    fn table_validation() {
        assert!(BinnedTable::new(vec![1.0, 1.0], vec![0.0; 3]).is_err());
        assert!(BinnedTable::new(vec![0.0], vec![0.0; 3]).is_err());
        assert!(BinnedTable::new(vec![0.0], vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn cusum_examples() {
        let s = cusum_update(&CusumState::new(10.0), 0.5).unwrap();
        assert_eq!(s.statistic, 0.5);
        let s = cusum_update(&CusumState { statistic: -0.2, ..CusumState::new(10.0) }, -0.1).unwrap();
        assert_abs_diff_eq!(s.statistic, -0.1);
        let s = cusum_update(&CusumState { statistic: 0.9, ..CusumState::new(1.0) }, 0.2).unwrap();
        assert_abs_diff_eq!(s.statistic, 1.1);
        assert!(s.stopped);
        assert!(matches!(cusum_update(&s, 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn glr_examples() {
        assert_eq!(glr_statistic([0.0, 0.0, 0.0].into_iter()), 0.0);
        assert_eq!(glr_statistic([3.0].into_iter()), 4.5);
        assert_eq!(glr_statistic([1.0, 1.0].into_iter()), 1.0);
        let mut g = GlrState::new(2, 100.0).unwrap();
        for x in [5.0, 1.0, 1.0] {
            g.update(x).unwrap();
        }
        assert_eq!(g.window().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert_eq!(g.statistic(), 1.0);
    }

    #[test]
    fn run_detector_ramps_and_truncates() {
        let up = Detector::Cusum {
            model: LikelihoodRatioModel::BinnedTable(BinnedTable::new(vec![], vec![1.0]).unwrap()),
            threshold: 3.0,
        };
        let d = run_detector(&up, std::iter::repeat(0.0), 100).unwrap();
        assert_eq!(d.stopped_at, Some(3));
        assert!(!d.truncated);
        let down = Detector::Cusum {
            model: LikelihoodRatioModel::BinnedTable(BinnedTable::new(vec![], vec![-1.0]).unwrap()),
            threshold: 3.0,
        };
        let d = run_detector(&down, std::iter::repeat(0.0), 100).unwrap();
        assert_eq!(d.stopped_at, None);
        assert!(d.truncated);
        assert!(run_detector(&down, std::iter::repeat(0.0), 0).is_err());
    }

    #[test]
    fn tabulation_tracks_model() {
        let m = LikelihoodRatioModel::SmoothedLfd(
            SmoothedLfd::new(vec![-0.5, 0.2, 1.4], vec![0.5, 0.4, 0.1], vec![0.1, 0.3, 0.6], 0.25).unwrap(),
        );
        let t = TabulatedLlr::new(m.clone(), -5.0, 6.0, 1e-3).unwrap();
        for i in 0..2000 {
            let x = -8.0 + i as f64 * 0.00811;
            assert_abs_diff_eq!(t.llr(x), m.llr(x), epsilon = 1e-5);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let m = LikelihoodRatioModel::BinnedTable(BinnedTable::new(vec![0.0], vec![-0.5, 0.5]).unwrap());
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("logRatio") && text.contains("edges"));
        assert_eq!(serde_json::from_str::<LikelihoodRatioModel>(&text).unwrap(), m);
    }
}
