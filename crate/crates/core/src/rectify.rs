//! Rectification, smoothed iterative rectification, and the flow-matching loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coupling::{
    smooth_coupling, GaussianJointCoupling, GmmJointCoupling, ParticleCoupling, SmoothVariant,
};
use crate::distributions::{GaussianDist, ParticleSet};
use crate::error::{Error, Result};
use crate::linalg::{self, Vector};
use crate::integrate::{self, IntegratorConfig, SpreadTracker};
use crate::ot;
use crate::rng;
use crate::velocity::{
    Bandwidth, GaussianVelocity, GmmVelocity, KernelVelocity, ScenarioField, ScenarioVelocity,
    VelocityField, DEFAULT_CUTOFF,
};

/// Default number of time strata of the loss estimate.
pub const DEFAULT_LOSS_TIME_SAMPLES: usize = 256;

/// Largest tolerated fraction of failed loss evaluations.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Collapse is declared when the spread of the tracked rows drops below this
/// fraction of their spread at `t = 0` (or of their targets, if smaller).
pub const COLLAPSE_REL_TOL: f64 = 1e-2;

/// A rectified row that moved less than this keeps the closed-form field valid.
pub const FIXED_POINT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    Constant(f64),
    /// `c_i = c0 / (i + 1)`.
    Harmonic(f64),
    Explicit(Vec<f64>),
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::Constant(0.0)
    }
}

impl NoiseSchedule {
    /// The first `k` levels, each checked to lie in `[0, 1)`.
    pub fn values(&self, k: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = match self {
            NoiseSchedule::Constant(c) => vec![*c; k],
            NoiseSchedule::Harmonic(c0) => (0..k).map(|i| c0 / (i as f64 + 1.0)).collect(),
            NoiseSchedule::Explicit(list) => {
                if list.len() < k {
                    return Err(Error::Config(format!(
                        "explicit schedule has {} levels, {k} needed",
                        list.len()
                    )));
                }
                list[..k].to_vec()
            }
        };
        if let Some(c) = v.iter().find(|c| !(0.0..1.0).contains(*c)) {
            return Err(Error::Config(format!("noise level {c} outside [0, 1)")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSettings {
    pub bandwidth: Bandwidth,
    /// `None` disables truncation.
    pub cutoff: Option<f64>,
}

impl Default for KernelSettings {
    fn default() -> Self {
        KernelSettings {
            bandwidth: Bandwidth::default(),
            cutoff: Some(DEFAULT_CUTOFF),
        }
    }
}

/// Where the velocity of a rectification step comes from.
#[derive(Clone)]
pub enum FieldSource {
    Gaussian(GaussianJointCoupling),
    Gmm(GmmJointCoupling),
    Scenario(ScenarioField),
    /// Estimated from the particles of the coupling being rectified.
    Kernel(KernelSettings),
    Custom(Arc<dyn VelocityField>),
}

impl std::fmt::Debug for FieldSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FieldSource {
    pub fn label(&self) -> &'static str {
        match self {
            FieldSource::Gaussian(_) => "gaussian",
            FieldSource::Gmm(_) => "gmm",
            FieldSource::Scenario(_) => "scenario",
            FieldSource::Kernel(_) => "kernel",
            FieldSource::Custom(_) => "custom",
        }
    }

    pub fn is_kernel(&self) -> bool {
        matches!(self, FieldSource::Kernel(_))
    }

    /// The field for `coupling`; `eps > 0` asks for the bridge (SDE) drift.
    pub fn build(
        &self,
        coupling: &ParticleCoupling,
        eps: f64,
        seed: u64,
    ) -> Result<Arc<dyn VelocityField>> {
        let v: Arc<dyn VelocityField> = match self {
            FieldSource::Gaussian(g) => Arc::new(GaussianVelocity::with_bridge_noise(g.clone(), eps)?),
            FieldSource::Gmm(g) => Arc::new(GmmVelocity::with_bridge_noise(g.clone(), eps)?),
            FieldSource::Scenario(s) => {
                if eps > 0.0 {
                    return Err(Error::Config("scenario fields have no bridge-noise variant".into()));
                }
                Arc::new(ScenarioVelocity::new(*s))
            }
            FieldSource::Kernel(k) => Arc::new(
                KernelVelocity::new(coupling, k.bandwidth.clone())?
                    .with_cutoff(k.cutoff)?
                    .with_bridge_noise(eps, seed)?,
            ),
            FieldSource::Custom(v) => v.clone(),
        };
        if v.dim() != coupling.dim() {
            return Err(Error::InvalidArgument(format!(
                "field dimension {} does not match coupling dimension {}",
                v.dim(),
                coupling.dim()
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub evaluations: usize,
    pub failures: usize,
}

/// Monte-Carlo estimate of `∫ E|v_t(X_t) - (X1 - X0)|^2 dt`.
///
/// Time is stratified into `time_samples` strata with one uniform draw each.
/// Evaluation `k` uses stratum `k mod m` and pair `perm[k mod n]` for a seeded
/// permutation, so every pair and every stratum is used at least once.
/// Failed or out-of-support evaluations are left out of the mean; more than
/// 1% of them is an error.
pub fn loss_eval(
    v: &dyn VelocityField,
    coupling: &ParticleCoupling,
    time_samples: usize,
    seed: u64,
) -> Result<LossEstimate> {
    let n = coupling.len();
    let d = coupling.dim();
    if n == 0 || time_samples == 0 {
        return Err(Error::InvalidArgument("loss needs pairs and time samples".into()));
    }
    if v.dim() != d {
        return Err(Error::InvalidArgument("field and coupling dimensions differ".into()));
    }
    let m = time_samples;
    let total = n.max(m);
    let perm = rng::permutation(n, rng::derive_seed(seed, 0));
    let u = rng::uniforms(m, rng::derive_seed(seed, 1));
    let x0 = coupling.x0().as_slice();
    let x1 = coupling.x1().as_slice();

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut used = 0usize;
    let mut failures = 0usize;
    let mut xs = Vec::new();
    let mut target = Vec::new();
    let mut out = Vec::new();
    for j in 0..m {
        let t = (j as f64 + u[j]) / m as f64;
        xs.clear();
        target.clear();
        for k in (j..total).step_by(m) {
            let i = perm[k % n];
            for c in 0..d {
                let (a, b) = (x0[i * d + c], x1[i * d + c]);
                xs.push((1.0 - t) * a + t * b);
                target.push(b - a);
            }
        }
        let rows = xs.len() / d;
        out.resize(xs.len(), 0.0);
        let before = v.out_of_support_events();
        let mut ok = vec![true; rows];
        if v.eval_batch(t, &xs, &mut out).is_err() {
            for r in 0..rows {
                match v.eval(t, &xs[r * d..(r + 1) * d]) {
                    Ok(val) => out[r * d..(r + 1) * d].copy_from_slice(&val),
                    Err(_) => ok[r] = false,
                }
            }
        }
        let missed = v.out_of_support_events() - before;
        failures += missed;
        for r in 0..rows {
            if !ok[r] {
                failures += 1;
                continue;
            }
            let e: f64 = (0..d)
                .map(|c| (out[r * d + c] - target[r * d + c]).powi(2))
                .sum();
            sum += e;
            sum_sq += e * e;
            used += 1;
        }
    }
    if failures as f64 > MAX_FAILURE_FRACTION * total as f64 {
        return Err(Error::Evaluation(format!(
            "{failures} of {total} loss evaluations failed or were out of support"
        )));
    }
    if used == 0 {
        return Err(Error::Evaluation("no loss evaluation succeeded".into()));
    }
    let mean = sum / used as f64;
    let var = (sum_sq / used as f64 - mean * mean).max(0.0);
    Ok(LossEstimate {
        value: mean,
        std_error: (var / used as f64).sqrt(),
        evaluations: total,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyOptions {
    pub loss_time_samples: usize,
    pub loss_seed: u64,
    /// SDE noise level of the bridge drift; `0` integrates the ODE.
    pub eps: f64,
    pub collapse_rel_tol: f64,
}

impl Default for RectifyOptions {
    fn default() -> Self {
        RectifyOptions {
            loss_time_samples: DEFAULT_LOSS_TIME_SAMPLES,
            loss_seed: 0,
            eps: 0.0,
            collapse_rel_tol: COLLAPSE_REL_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifyDiagnostics {
    pub cost_before: f64,
    pub cost_after: f64,
    /// Loss of the used field on the input coupling.
    pub loss: LossEstimate,
    /// Smallest spread of the tracked rows at an interior grid time.
    pub min_spread: f64,
    pub t_min_spread: f64,
    pub out_of_support: usize,
    /// Largest distance between an output `z1` row and the input `x1` row.
    pub max_row_shift: f64,
}

/// `(x0, z1)` with `z1` the time-1 flow of the field built from `source`.
pub fn rectify(
    coupling: &ParticleCoupling,
    source: &FieldSource,
    config: &IntegratorConfig,
) -> Result<(ParticleCoupling, RectifyDiagnostics)> {
    let v = source.build(coupling, 0.0, config.seed)?;
    rectify_with_field(coupling, v.as_ref(), config, &RectifyOptions::default())
}

/// [`rectify`] with a prebuilt field.
pub fn rectify_with_field(
    coupling: &ParticleCoupling,
    v: &dyn VelocityField,
    config: &IntegratorConfig,
    options: &RectifyOptions,
) -> Result<(ParticleCoupling, RectifyDiagnostics)> {
    config.validate()?;
    if v.dim() != coupling.dim() {
        return Err(Error::InvalidArgument("field and coupling dimensions differ".into()));
    }
    let n = coupling.len();
    let d = coupling.dim();
    let loss = loss_eval(v, coupling, options.loss_time_samples, options.loss_seed)?;

    let mut tracker = SpreadTracker::new(n, d);
    let reps = integrate::representatives(n);
    let target_spread = integrate::spread(coupling.x1().select(&reps).as_slice(), d);
    let start_spread = integrate::spread(coupling.x0().select(&reps).as_slice(), d);
    let tol = options.collapse_rel_tol * start_spread.min(target_spread);

    let oos_before = v.out_of_support_events();
    let singular = v.time_domain().singular_in(0.0, config.t_end_clip);
    let result = match singular {
        Some(s) => {
            // run up to the last grid time before the singularity, then judge
            let h = config.t_end_clip / config.steps as f64;
            let k = ((s / h).ceil() as usize).saturating_sub(1);
            let k = if k as f64 * h >= s { k.saturating_sub(1) } else { k };
            if k > 0 {
                let _ = integrate::integrate_window(
                    v,
                    coupling.x0(),
                    k as f64 * h,
                    config.scheme,
                    k,
                    &mut |t, z| tracker.observe(t, z),
                );
            }
            Err(Error::SingularTime { t: s })
        }
        None => integrate::integrate_particles_observed(
            v,
            options.eps,
            coupling.x0(),
            config,
            &mut |t, z| tracker.observe(t, z),
        ),
    };
    if tracker.min_spread < tol {
        return Err(Error::NonRectifiable {
            t_star: tracker.t_star,
            min_spread: tracker.min_spread,
        });
    }
    let z1 = result?;
    let max_row_shift = z1
        .rows()
        .zip(coupling.x1().rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .fold(0.0, f64::max)
        .sqrt();
    let out = ParticleCoupling::new(coupling.x0().clone(), z1)?;
    let diagnostics = RectifyDiagnostics {
        cost_before: ot::transport_cost(coupling),
        cost_after: ot::transport_cost(&out),
        loss,
        min_spread: tracker.min_spread,
        t_min_spread: tracker.t_star,
        out_of_support: v.out_of_support_events() - oos_before,
        max_row_shift,
    };
    Ok((out, diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    DiscreteExact,
    GaussianClosedForm,
    Quantile1d,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete_exact" => Ok(Baseline::DiscreteExact),
            "gaussian_closed_form" => Ok(Baseline::GaussianClosedForm),
            "quantile_1d" => Ok(Baseline::Quantile1d),
            _ => Err(Error::Config(format!(
                "unknown baseline '{s}' (expected discrete_exact, gaussian_closed_form or quantile_1d)"
            ))),
        }
    }
}

/// Optimal cost of the coupling's empirical marginals under `baseline`.
pub fn baseline_cost(coupling: &ParticleCoupling, baseline: Baseline) -> Result<f64> {
    let (s0, s1) = (coupling.x0(), coupling.x1());
    match baseline {
        Baseline::DiscreteExact => Ok(ot::discrete_ot_exact(s0, s1)?.cost),
        Baseline::Quantile1d => Ok(ot::quantile_ot_1d(s0, s1)?.cost),
        Baseline::GaussianClosedForm => {
            let fit = |s: &ParticleSet| {
                GaussianDist::new(Vector::from_vec(s.mean()), linalg::symmetrize(&s.covariance()))
            };
            ot::bures_wasserstein(&fit(s0)?, &fit(s1)?)
        }
    }
}

/// Transport cost of the coupling minus the baseline's optimal cost.
pub fn optimality_gap(coupling: &ParticleCoupling, baseline: Baseline) -> Result<f64> {
    Ok(ot::transport_cost(coupling) - baseline_cost(coupling, baseline)?)
}

/// Settings of [`smoothed_rectify_iterate`].
#[derive(Debug, Clone)]
pub struct IterationConfig {
    pub schedule: NoiseSchedule,
    /// Number of rectification steps `K`.
    pub steps: usize,
    /// Field of the initial coupling. Reused while the coupling provably stays
    /// unchanged; afterwards `kernel` takes over.
    pub field: FieldSource,
    pub kernel: KernelSettings,
    pub integrator: IntegratorConfig,
    /// SDE noise of the bridge drift, `0` for the ODE.
    pub eps: f64,
    pub seed: u64,
    pub loss_time_samples: usize,
    /// Compute energy distances of the marginals to the references.
    pub energy: bool,
    /// Compute permutation-null thresholds next to the energy distances.
    pub null_test: bool,
    /// Fresh samples of the two marginals; the initial particles are used
    /// when absent.
    pub reference0: Option<ParticleSet>,
    pub reference1: Option<ParticleSet>,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            schedule: NoiseSchedule::default(),
            steps: 1,
            field: FieldSource::Kernel(KernelSettings::default()),
            kernel: KernelSettings::default(),
            integrator: IntegratorConfig::default(),
            eps: 0.0,
            seed: 0,
            loss_time_samples: DEFAULT_LOSS_TIME_SAMPLES,
            energy: true,
            null_test: false,
            reference0: None,
            reference1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub c_i: f64,
    /// Loss of the used field on the smoothed input coupling.
    pub loss: f64,
    /// Cost of the rectified coupling.
    pub transport_cost: f64,
    pub transport_distance: f64,
    /// Energy distance of the smoothed `x0` to the `mu0` reference.
    pub energy_mu0: Option<f64>,
    /// Energy distance of the rectified `z1` to the `mu1` reference.
    pub energy_mu1: Option<f64>,
    pub seed: u64,
    pub cost_before: f64,
    pub field: String,
    pub loss_failures: usize,
    pub energy_mu0_threshold: Option<f64>,
    pub energy_mu1_threshold: Option<f64>,
    /// Transport cost minus the baseline cost, when a baseline was computed.
    #[serde(default)]
    pub optimality_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub initial_cost: f64,
    /// Mean squared norm of the target particles.
    pub v1: f64,
    pub steps: Vec<StepRecord>,
    /// `min_{i <= k} L^i` for each step `k`.
    pub min_loss: Vec<f64>,
    /// `C / k + (2 + V1) mean(c_0..c_{k-1})` for `k = 1..=steps`.
    pub bound: Vec<f64>,
    pub aborted_at: Option<usize>,
    pub abort_reason: Option<String>,
    pub warnings: Vec<String>,
}

impl IterationReport {
    pub fn empty(initial_cost: f64, v1: f64) -> Self {
        IterationReport {
            initial_cost,
            v1,
            steps: Vec::new(),
            min_loss: Vec::new(),
            bound: Vec::new(),
            aborted_at: None,
            abort_reason: None,
            warnings: Vec::new(),
        }
    }

    fn push(&mut self, record: StepRecord) {
        let prev = self.min_loss.last().copied().unwrap_or(f64::INFINITY);
        self.min_loss.push(prev.min(record.loss));
        let k = self.steps.len() + 1;
        let mean_c = (self.steps.iter().map(|s| s.c_i).sum::<f64>() + record.c_i) / k as f64;
        self.bound
            .push(self.initial_cost / k as f64 + (2.0 + self.v1) * mean_c);
        self.steps.push(record);
    }
}

/// Report and final coupling of an iteration; `error` is set when a step
/// failed, in which case the report holds the completed steps only.
#[derive(Debug)]
pub struct IterationOutcome {
    pub report: IterationReport,
    pub coupling: ParticleCoupling,
    pub error: Option<Error>,
}

/// `K` steps of: variance-preserving smoothing of `z0` with level `c_i`,
/// then rectification.
pub fn smoothed_rectify_iterate(
    initial: &ParticleCoupling,
    config: &IterationConfig,
) -> Result<IterationOutcome> {
    config.integrator.validate()?;
    let levels = config.schedule.values(config.steps)?;
    let d = initial.dim();
    let n = initial.len();
    let v1 = initial.x1().second_moment() * d as f64;
    let mut report = IterationReport::empty(ot::transport_cost(initial), v1);
    let ref0 = config.reference0.clone().unwrap_or_else(|| initial.x0().clone());
    let ref1 = config.reference1.clone().unwrap_or_else(|| initial.x1().clone());

    if levels.iter().any(|&c| c > 0.0) {
        let fresh = GaussianDist::standard(d).sample(n.min(ot::energy::MAX_POINTS), rng::derive_seed(config.seed, u64::MAX))?;
        let e = ot::energy_distance(initial.x0(), &fresh)?;
        let thr = ot::energy_null_threshold(initial.x0(), &fresh, ot::energy::NULL_PERMUTATIONS, 0.95, config.seed)?;
        if e > thr {
            let msg = format!(
                "smoothing assumes x0 ~ N(0, I), but the energy distance to fresh normals is {e:.4} (null threshold {thr:.4})"
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
    }

    let mut current = initial.clone();
    let mut exact_valid = !config.field.is_kernel();
    let kernel = FieldSource::Kernel(config.kernel.clone());
    for (i, &c) in levels.iter().enumerate() {
        let step_seed = rng::derive_seed(config.seed, i as u64);
        let step = (|| -> Result<(StepRecord, ParticleCoupling, bool)> {
            let smoothed = smooth_coupling(
                &current,
                c,
                SmoothVariant::VariancePreserving,
                rng::derive_seed(step_seed, 1),
            )?;
            let use_exact = exact_valid && c == 0.0;
            let source = if use_exact { &config.field } else { &kernel };
            let v = source.build(&smoothed, config.eps, rng::derive_seed(step_seed, 4))?;
            let integrator = IntegratorConfig {
                seed: rng::derive_seed(step_seed, 3),
                ..config.integrator.clone()
            };
            let options = RectifyOptions {
                loss_time_samples: config.loss_time_samples,
                loss_seed: rng::derive_seed(step_seed, 2),
                eps: config.eps,
                ..RectifyOptions::default()
            };
            let (next, diag) = rectify_with_field(&smoothed, v.as_ref(), &integrator, &options)?;
            let (energy_mu0, energy_mu1) = if config.energy {
                (
                    Some(ot::energy_distance(smoothed.x0(), &ref0)?),
                    Some(ot::energy_distance(next.x1(), &ref1)?),
                )
            } else {
                (None, None)
            };
            let (t0, t1) = if config.energy && config.null_test {
                (
                    Some(ot::energy_null_threshold(
                        smoothed.x0(),
                        &ref0,
                        ot::energy::NULL_PERMUTATIONS,
                        0.95,
                        rng::derive_seed(step_seed, 5),
                    )?),
                    Some(ot::energy_null_threshold(
                        next.x1(),
                        &ref1,
                        ot::energy::NULL_PERMUTATIONS,
                        0.95,
                        rng::derive_seed(step_seed, 6),
                    )?),
                )
            } else {
                (None, None)
            };
            let record = StepRecord {
                step: i,
                c_i: c,
                loss: diag.loss.value,
                transport_cost: diag.cost_after,
                transport_distance: diag.cost_after.sqrt(),
                energy_mu0,
                energy_mu1,
                seed: step_seed,
                cost_before: diag.cost_before,
                field: source.label().to_string(),
                loss_failures: diag.loss.failures,
                energy_mu0_threshold: t0,
                energy_mu1_threshold: t1,
                optimality_gap: None,
            };
            let still_exact = use_exact && config.eps == 0.0 && diag.max_row_shift < FIXED_POINT_TOL;
            Ok((record, next, still_exact))
        })();
        match step {
            Ok((record, next, still_exact)) => {
                log::info!(
                    "step {i}: c = {c}, loss = {:.6}, cost = {:.6}",
                    record.loss,
                    record.transport_cost
                );
                report.push(record);
                current = next;
                exact_valid = still_exact;
            }
            Err(e) => {
                report.aborted_at = Some(i);
                report.abort_reason = Some(format!("step {i} (seed {step_seed}): {e}"));
                return Ok(IterationOutcome {
                    report,
                    coupling: current,
                    error: Some(e),
                });
            }
        }
    }
    Ok(IterationOutcome {
        report,
        coupling: current,
        error: None,
    })
}
