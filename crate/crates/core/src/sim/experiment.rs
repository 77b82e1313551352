use std::fmt;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    calibrate_threshold, estimate_edd, substream, CalibrationResult, CurvePoint, Domain, RunLengthSampler,
    ScenarioConfig, Score, SimDetector, Source,
};
use crate::detect::{
    bin_edges_empirical, bin_masses, binned_distribution, BinnedTable, LikelihoodRatioModel, SmoothedLfd,
    TabulatedLlr,
};
use crate::error::{Error, Result};
use crate::lfd::{solve_lfd, solve_lfd_kl, verify_weak_boundedness, KlLfdSolution, LfdProblem, LfdSolution, SolverOptions, WeakBoundednessReport};
use crate::space::GroundMetric;

/// Grid step of the tabulated smoothed log ratio, as a fraction of `h`.
const TABLE_STEP_PER_H: f64 = 4e-3;
/// Margin of the tabulated range beyond the support.
const TABLE_MARGIN: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// CUSUM with the true Gaussian densities.
    Exact,
    /// Window-limited GLR over an unknown mean shift.
    Glr,
    /// CUSUM on kernel-smoothed Wasserstein LFDs.
    RobustWas,
    /// CUSUM on Wasserstein LFDs aggregated into bins.
    RobustWasBinned,
    /// CUSUM on KL-ball LFDs over binned nominals.
    RobustKlBinned,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Exact,
        Method::Glr,
        Method::RobustWas,
        Method::RobustWasBinned,
        Method::RobustKlBinned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Glr => "glr",
            Method::RobustWas => "robust-was",
            Method::RobustWasBinned => "robust-was-binned",
            Method::RobustKlBinned => "robust-kl-binned",
        }
    }

    fn uses_wasserstein_lfd(self) -> bool {
        matches!(self, Method::RobustWas | Method::RobustWasBinned)
    }

    fn uses_bins(self) -> bool {
        matches!(self, Method::RobustWasBinned | Method::RobustKlBinned)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AmbiguityConfig {
    pub r1: f64,
    pub r2: f64,
    pub metric: GroundMetric,
    /// Training samples drawn from the pre- and post-change laws.
    pub pre_samples: usize,
    pub post_samples: usize,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        AmbiguityConfig {
            r1: 0.3,
            r2: 0.3,
            metric: GroundMetric::L1,
            pre_samples: 50,
            post_samples: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorOptions {
    /// Kernel bandwidth.
    pub h: f64,
    /// Number of bins.
    #[serde(rename = "L")]
    pub bins: usize,
    /// GLR window.
    #[serde(rename = "W")]
    pub window: usize,
    /// Radii of the KL balls of the binned baseline.
    #[serde(rename = "klRadii")]
    pub kl_radii: [f64; 2],
}

impl Default for DetectorOptions {
    fn default() -> Self {
        DetectorOptions {
            h: 0.25,
            bins: 20,
            window: 50,
            kl_radii: [0.05, 0.05],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimConfig {
    pub gamma_list: Vec<f64>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Cap on run lengths; defaults to 20 times the largest target ARL.
    #[serde(default)]
    pub horizon: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Contamination levels for delay streams; one curve per level.
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    #[serde(default = "default_tol")]
    pub tol_fraction: f64,
    /// Law under which robust detectors are calibrated.
    #[serde(default)]
    pub calibration: CalibrationLaw,
}

/// Pre-change law used to calibrate the robust detectors. Exact CUSUM and
/// GLR are always calibrated under the scenario's pre-change Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationLaw {
    /// The method's own pre-change LFD: worst-case false alarms.
    #[default]
    LeastFavorable,
    /// The scenario's pre-change Gaussian, shared by every method.
    PreChange,
}

fn default_reps() -> usize {
    10_000
}

fn default_tol() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::invalid(format!("unknown format {other:?} (expected csv or json)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

/// Everything a calibration or comparison run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub ambiguity: AmbiguityConfig,
    #[serde(default)]
    pub detector: DetectorOptions,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    pub sim: SimConfig,
    #[serde(default)]
    pub io: IoConfig,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Exact, Method::RobustWas, Method::Glr]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("config field `{field}`: {why}")));
        self.scenario.validate()?;
        let a = &self.ambiguity;
        if !(a.r1 >= 0.0 && a.r1.is_finite()) {
            return bad("ambiguity.r1", "must be finite and nonnegative");
        }
        if !(a.r2 >= 0.0 && a.r2.is_finite()) {
            return bad("ambiguity.r2", "must be finite and nonnegative");
        }
        if a.pre_samples == 0 || a.post_samples == 0 {
            return bad("ambiguity.preSamples", "training sets must be nonempty");
        }
        let d = &self.detector;
        if !(d.h > 0.0 && d.h.is_finite()) {
            return bad("detector.h", "bandwidth must be positive");
        }
        if d.bins < 2 {
            return bad("detector.L", "need at least 2 bins");
        }
        if self.methods.iter().any(|m| m.uses_bins()) && d.bins > a.pre_samples {
            return bad("detector.L", "more bins than pre-change training samples");
        }
        if d.window == 0 {
            return bad("detector.W", "window must be at least 1");
        }
        if !d.kl_radii.iter().all(|r| *r >= 0.0 && r.is_finite()) {
            return bad("detector.klRadii", "must be finite and nonnegative");
        }
        if self.methods.is_empty() {
            return bad("methods", "name at least one method");
        }
        let s = &self.sim;
        if s.gamma_list.is_empty() || !s.gamma_list.iter().all(|g| *g > 1.0 && g.is_finite()) {
            return bad("sim.gammaList", "targets must be finite and above 1");
        }
        if s.reps == 0 {
            return bad("sim.reps", "must be at least 1");
        }
        if s.horizon == Some(0) {
            return bad("sim.horizon", "must be at least 1");
        }
        if !(s.tol_fraction > 0.0 && s.tol_fraction.is_finite()) {
            return bad("sim.tolFraction", "must be positive");
        }
        if let Some(eps) = &s.eps_list {
            if eps.is_empty() || !eps.iter().all(|e| *e >= 0.0 && e.is_finite()) {
                return bad("sim.epsList", "levels must be finite and nonnegative");
            }
        }
        Ok(())
    }

    /// Run-length cap shared by all targets.
    pub fn horizon(&self) -> u64 {
        self.sim.horizon.unwrap_or_else(|| {
            let g = self.sim.gamma_list.iter().copied().fold(1.0, f64::max);
            (20.0 * g).ceil() as u64
        })
    }

    /// Contamination levels of the delay streams, with their curve labels.
    fn delay_levels(&self) -> Vec<(f64, Option<String>)> {
        match &self.sim.eps_list {
            Some(list) => list.iter().map(|e| (*e, Some(format!("eps={e}")))).collect(),
            None => vec![(self.scenario.contamination_eps, None)],
        }
    }
}

/// A method ready to simulate.
#[derive(Clone, Debug)]
pub struct MethodSetup {
    pub method: Method,
    pub detector: SimDetector,
    /// Law under which the threshold is calibrated.
    pub calibration: Source,
    /// Nominal pre-change law the method was built from.
    pub nominal: Source,
}

#[derive(Clone, Debug)]
pub struct PreparedMethods {
    pub pre_training: Vec<f64>,
    pub post_training: Vec<f64>,
    pub lfd: Option<LfdSolution>,
    pub weak_boundedness: Option<WeakBoundednessReport>,
    pub edges: Option<Vec<f64>>,
    pub kl: Option<KlLfdSolution>,
    pub setups: Vec<MethodSetup>,
    pub warnings: Vec<String>,
}

fn draw_gaussian(seed: u64, index: u64, n: usize, mean: f64, std: f64) -> Vec<f64> {
    let mut rng = substream(seed, Domain::Training, index);
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            mean + std * z
        })
        .collect()
}

/// A point inside each bin; the binned score is constant on a bin.
fn bin_representatives(edges: &[f64]) -> Vec<f64> {
    let mut reps = Vec::with_capacity(edges.len() + 1);
    reps.push(edges[0] - 1.0);
    reps.extend(edges.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    reps.push(edges[edges.len() - 1] + 1.0);
    reps
}

/// Draws the training samples, solves the LFD programs the methods need and
/// builds each method's detector and calibration law.
pub fn prepare_methods(config: &ExperimentConfig) -> Result<PreparedMethods> {
    prepare_methods_with(config, None)
}

/// Like [`prepare_methods`], but the Wasserstein methods use `lfd` instead of
/// solving from the training samples.
pub fn prepare_methods_with(config: &ExperimentConfig, lfd: Option<LfdSolution>) -> Result<PreparedMethods> {
    config.validate()?;
    let sc = &config.scenario;
    let amb = &config.ambiguity;
    let opts = &config.detector;
    let seed = config.sim.seed;
    let pre = draw_gaussian(seed, 0, amb.pre_samples, sc.pre_mean, sc.pre_std);
    let post = draw_gaussian(seed, 1, amb.post_samples, sc.post_mean, sc.post_std);
    let mut warnings = Vec::new();

    let needs_lfd = config.methods.iter().any(|m| m.uses_wasserstein_lfd());
    let (lfd, weak) = if needs_lfd {
        let solution = match lfd {
            Some(given) if given.dim() != 1 => {
                return Err(Error::invalid("simulation needs a one-dimensional LFD"));
            }
            Some(given) => given,
            None => {
                let problem = LfdProblem::scalar(&pre, &post, amb.r1, amb.r2, amb.metric)?;
                solve_lfd(&problem, &SolverOptions::default())?
            }
        };
        let report = verify_weak_boundedness(&solution)?;
        if !report.satisfied {
            warnings.push(format!(
                "weak stochastic boundedness fails: worst-case mean likelihood ratio {}",
                report.worst_case_mean_lr
            ));
        }
        (Some(solution), Some(report))
    } else {
        (None, None)
    };
    let edges = if config.methods.iter().any(|m| m.uses_bins()) {
        Some(bin_edges_empirical(&pre, opts.bins)?)
    } else {
        None
    };
    let kl = if config.methods.contains(&Method::RobustKlBinned) {
        let e = edges.as_deref().expect("edges built for binned methods");
        let q0 = binned_distribution(&pre, e);
        let q1 = binned_distribution(&post, e);
        Some(solve_lfd_kl(&q0, &q1, opts.kl_radii[0], opts.kl_radii[1], &SolverOptions::default())?)
    } else {
        None
    };

    let gaussian_pre = Source::gaussian(sc.pre_mean, sc.pre_std, 0.0)?;
    let robust_law = |least_favorable: Source| -> Result<Source> {
        Ok(match config.sim.calibration {
            CalibrationLaw::LeastFavorable => least_favorable,
            CalibrationLaw::PreChange => gaussian_pre.clone(),
        })
    };
    let mut setups = Vec::new();
    for &method in &config.methods {
        let setup = match method {
            Method::Exact => MethodSetup {
                method,
                detector: SimDetector::Cusum(Score::GaussianPair {
                    m1: sc.pre_mean,
                    s1: sc.pre_std,
                    m2: sc.post_mean,
                    s2: sc.post_std,
                }),
                calibration: gaussian_pre.clone(),
                nominal: gaussian_pre.clone(),
            },
            Method::Glr => MethodSetup {
                method,
                detector: SimDetector::Glr {
                    window: opts.window,
                    mean: sc.pre_mean,
                    std: sc.pre_std,
                },
                calibration: gaussian_pre.clone(),
                nominal: gaussian_pre.clone(),
            },
            Method::RobustWas => {
                let sol = lfd.as_ref().expect("LFD solved for Wasserstein methods");
                let smoothed = SmoothedLfd::from_solution(sol, opts.h)?;
                let lo = smoothed.support.iter().copied().fold(f64::INFINITY, f64::min) - TABLE_MARGIN;
                let hi = smoothed.support.iter().copied().fold(f64::NEG_INFINITY, f64::max) + TABLE_MARGIN;
                let z = smoothed.support.clone();
                let table = TabulatedLlr::new(
                    LikelihoodRatioModel::SmoothedLfd(smoothed),
                    lo,
                    hi,
                    TABLE_STEP_PER_H * opts.h,
                )?;
                MethodSetup {
                    method,
                    detector: SimDetector::Cusum(Score::Tabulated(table)),
                    calibration: robust_law(Source::mixture(z.clone(), &sol.p1, opts.h)?)?,
                    nominal: Source::mixture(z, &sol.mu0, opts.h)?,
                }
            }
            Method::RobustWasBinned => {
                let sol = lfd.as_ref().expect("LFD solved for Wasserstein methods");
                let e = edges.clone().expect("edges built for binned methods");
                let z: Vec<f64> = sol.support.iter().map(|p| p.coords()[0]).collect();
                let q1 = bin_masses(&z, &sol.p1, &e);
                let q2 = bin_masses(&z, &sol.p2, &e);
                MethodSetup {
                    method,
                    detector: SimDetector::Cusum(Score::Binned(BinnedTable::from_masses(e, &q1, &q2)?)),
                    calibration: robust_law(Source::mixture(z.clone(), &sol.p1, 0.0)?)?,
                    nominal: Source::mixture(z, &sol.mu0, 0.0)?,
                }
            }
            Method::RobustKlBinned => {
                let sol = kl.as_ref().expect("KL LFD solved");
                let e = edges.clone().expect("edges built for binned methods");
                let reps = bin_representatives(&e);
                let q0 = binned_distribution(&pre, &e);
                MethodSetup {
                    method,
                    detector: SimDetector::Cusum(Score::Binned(BinnedTable::from_masses(e, &sol.p1, &sol.p2)?)),
                    calibration: robust_law(Source::mixture(reps.clone(), &sol.p1, 0.0)?)?,
                    nominal: Source::mixture(reps, &q0, 0.0)?,
                }
            }
        };
        setups.push(setup);
    }
    Ok(PreparedMethods {
        pre_training: pre,
        post_training: post,
        lfd,
        weak_boundedness: weak,
        edges,
        kl,
        setups,
        warnings,
    })
}

/// Calibrated thresholds for every method and target, in config order.
pub fn calibrate_methods(
    config: &ExperimentConfig,
    prepared: &PreparedMethods,
) -> Result<Vec<(Method, f64, CalibrationResult)>> {
    let horizon = config.horizon();
    let mut out = Vec::new();
    for setup in &prepared.setups {
        let mut sampler = RunLengthSampler::new(
            setup.detector.clone(),
            setup.calibration.clone(),
            config.sim.reps,
            horizon,
            config.sim.seed,
            Domain::PreChange,
        )?;
        for &gamma in &config.sim.gamma_list {
            let cal = calibrate_threshold(&mut sampler, gamma, config.sim.tol_fraction)?;
            out.push((setup.method, gamma, cal));
        }
    }
    Ok(out)
}

/// Result of [`compare_methods`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub points: Vec<CurvePoint>,
    pub warnings: Vec<String>,
}

/// Calibrates every method at every target ARL under its own pre-change law,
/// then estimates its delay on post-change streams (change at time 1).
pub fn compare_methods(config: &ExperimentConfig) -> Result<Comparison> {
    compare_prepared(config, &prepare_methods(config)?)
}

/// [`compare_methods`] on already prepared methods.
pub fn compare_prepared(config: &ExperimentConfig, prepared: &PreparedMethods) -> Result<Comparison> {
    let calibrations = calibrate_methods(config, prepared)?;
    let horizon = config.horizon();
    let sc = &config.scenario;
    let mut warnings = prepared.warnings.clone();
    let mut points = Vec::new();
    for (method, gamma, cal) in calibrations {
        let setup = prepared
            .setups
            .iter()
            .find(|s| s.method == method)
            .expect("calibrated methods come from the setups");
        if cal.truncated as f64 > super::TRUNCATION_WARNING_FRACTION * cal.replications as f64 {
            warnings.push(format!("{method} at gamma {gamma}: {} runs truncated", cal.truncated));
        }
        for (eps, label) in config.delay_levels() {
            let post = Source::gaussian(sc.post_mean, sc.post_std, eps)?;
            let edd = estimate_edd(&setup.detector, &post, cal.threshold, config.sim.reps, horizon, config.sim.seed)?;
            if edd.truncation_warning() {
                warnings.push(format!("{method} at gamma {gamma}: delay runs truncated"));
            }
            points.push(CurvePoint {
                method: match label {
                    Some(l) => format!("{method}[{l}]"),
                    None => method.to_string(),
                },
                gamma,
                threshold: cal.threshold,
                arl_est: cal.achieved_arl,
                arl_stderr: cal.arl_stderr,
                edd_est: edd.mean,
                edd_stderr: edd.stderr,
                replications: config.sim.reps,
            });
        }
    }
    Ok(Comparison { points, warnings })
}

/// CSV with header `method,gamma,arl,arl_stderr,edd,edd_stderr,reps`.
pub fn curve_csv(points: &[CurvePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::invalid(format!("CSV output: {e}"));
    w.write_record(["method", "gamma", "arl", "arl_stderr", "edd", "edd_stderr", "reps"])
        .map_err(io)?;
    for p in points {
        w.write_record([
            p.method.clone(),
            p.gamma.to_string(),
            p.arl_est.to_string(),
            p.arl_stderr.to_string(),
            p.edd_est.to_string(),
            p.edd_stderr.to_string(),
            p.replications.to_string(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("CSV output: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV of ASCII fields"))
}
