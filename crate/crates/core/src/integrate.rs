//! Fixed-step ODE and Euler-Maruyama integration of particle clouds.

use serde::{Deserialize, Serialize};

use crate::distributions::ParticleSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::velocity::VelocityField;

/// Default `1 - t_end_clip`.
pub const DEFAULT_CLIP: f64 = 1e-4;

/// Cap on the number of starts used for spread measurements.
pub const MAX_SPREAD_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub steps: usize,
    /// Integration stops at this time; the remaining `1 - t_end_clip` is
    /// covered by one extrapolation step with the velocity evaluated there.
    pub t_end_clip: f64,
    /// Seed of the Brownian increments (SDE only).
    pub seed: u64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            scheme: Scheme::Rk4,
            steps: 100,
            t_end_clip: 1.0 - DEFAULT_CLIP,
            seed: 0,
        }
    }
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, steps: usize) -> Self {
        IntegratorConfig {
            scheme,
            steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("integrator steps must be >= 1".into()));
        }
        if !(self.t_end_clip > 0.5 && self.t_end_clip <= 1.0) {
            return Err(Error::Config(format!(
                "t_end_clip {} must lie in (0.5, 1]",
                self.t_end_clip
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Time-1 state of a single path.
pub fn integrate_ode(
    v: &dyn VelocityField,
    x0: &[f64],
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    config.validate()?;
    trajectory(v, 0.0, x0, config.scheme, config.steps, config.t_end_clip, true, config.seed)
}

/// Euler-Maruyama path of `dY = v(Y) dt + sqrt(eps) dW`.
pub fn integrate_sde(
    v: &dyn VelocityField,
    eps: f64,
    x0: &[f64],
    config: &IntegratorConfig,
) -> Result<Trajectory> {
    config.validate()?;
    check_eps(eps)?;
    trajectory(v, eps, x0, Scheme::Euler, config.steps, config.t_end_clip, true, config.seed)
}

/// Integrate on `[0, t_end]` without the final extrapolation.
pub fn integrate_ode_until(
    v: &dyn VelocityField,
    x0: &[f64],
    t_end: f64,
    scheme: Scheme,
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 || !(t_end > 0.0 && t_end <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need steps >= 1 and t_end in (0, 1], got {steps} and {t_end}"
        )));
    }
    trajectory(v, 0.0, x0, scheme, steps, t_end, false, 0)
}

#[allow(clippy::too_many_arguments)]
fn trajectory(
    v: &dyn VelocityField,
    eps: f64,
    x0: &[f64],
    scheme: Scheme,
    steps: usize,
    t_end: f64,
    extrapolate: bool,
    seed: u64,
) -> Result<Trajectory> {
    if x0.len() != v.dim() {
        return Err(Error::InvalidArgument("start dimension does not match field".into()));
    }
    let start = ParticleSet::new(1, x0.len(), x0.to_vec())?;
    let mut times = Vec::with_capacity(steps + 2);
    let mut states = Vec::with_capacity(steps + 2);
    let grid = Grid {
        scheme,
        steps,
        t_end,
        extrapolate,
        eps,
        seed,
    };
    grid.run(v, &start, &mut |t, z| {
        times.push(t);
        states.push(z.to_vec());
    })?;
    Ok(Trajectory { times, states })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level {eps} must be >= 0")));
    }
    Ok(())
}

/// Time-1 states of every row of `starts`.
pub fn integrate_particles(
    v: &dyn VelocityField,
    starts: &ParticleSet,
    config: &IntegratorConfig,
) -> Result<ParticleSet> {
    integrate_particles_observed(v, 0.0, starts, config, &mut |_, _| {})
}

/// SDE counterpart of [`integrate_particles`]; row `i` uses row `i` of each
/// step's noise draw.
pub fn integrate_particles_sde(
    v: &dyn VelocityField,
    eps: f64,
    starts: &ParticleSet,
    config: &IntegratorConfig,
) -> Result<ParticleSet> {
    check_eps(eps)?;
    integrate_particles_observed(v, eps, starts, config, &mut |_, _| {})
}

/// Like [`integrate_particles_sde`] (with `eps = 0` the ODE), calling
/// `observe(t, states)` at every grid time including `0` and `1`.
pub fn integrate_particles_observed(
    v: &dyn VelocityField,
    eps: f64,
    starts: &ParticleSet,
    config: &IntegratorConfig,
    observe: &mut dyn FnMut(f64, &[f64]),
) -> Result<ParticleSet> {
    config.validate()?;
    check_eps(eps)?;
    if starts.dim() != v.dim() {
        return Err(Error::InvalidArgument("start dimension does not match field".into()));
    }
    let grid = Grid {
        scheme: if eps > 0.0 { Scheme::Euler } else { config.scheme },
        steps: config.steps,
        t_end: config.t_end_clip,
        extrapolate: true,
        eps,
        seed: config.seed,
    };
    grid.run(v, starts, observe)
}

/// ODE on `[0, t_end]` with `steps` steps and no extrapolation.
pub(crate) fn integrate_window(
    v: &dyn VelocityField,
    starts: &ParticleSet,
    t_end: f64,
    scheme: Scheme,
    steps: usize,
    observe: &mut dyn FnMut(f64, &[f64]),
) -> Result<ParticleSet> {
    let grid = Grid {
        scheme,
        steps,
        t_end,
        extrapolate: false,
        eps: 0.0,
        seed: 0,
    };
    grid.run(v, starts, observe)
}

struct Grid {
    scheme: Scheme,
    steps: usize,
    t_end: f64,
    extrapolate: bool,
    eps: f64,
    seed: u64,
}

impl Grid {
    fn time(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.steps as f64
    }

    fn run(
        &self,
        v: &dyn VelocityField,
        starts: &ParticleSet,
        observe: &mut dyn FnMut(f64, &[f64]),
    ) -> Result<ParticleSet> {
        let domain = v.time_domain();
        if let Some(s) = domain.singular_in(-1.0, self.t_end) {
            if s >= 0.0 {
                return Err(Error::SingularTime { t: s });
            }
        }
        domain.check(0.0)?;
        domain.check(self.t_end)?;

        let n = starts.len();
        let d = starts.dim();
        let mut z = starts.as_slice().to_vec();
        let mut k1 = vec![0.0; z.len()];
        let mut k2 = vec![0.0; z.len()];
        let mut k3 = vec![0.0; z.len()];
        let mut k4 = vec![0.0; z.len()];
        let mut tmp = vec![0.0; z.len()];
        observe(0.0, &z);

        let eval = |t: f64, x: &[f64], out: &mut [f64]| -> Result<()> {
            v.eval_batch(t, x, out).map_err(|e| locate(e, t, x, d))
        };

        for k in 0..self.steps {
            let t = self.time(k);
            let t_next = self.time(k + 1);
            let h = t_next - t;
            match self.scheme {
                Scheme::Euler => {
                    eval(t, &z, &mut k1)?;
                    for (zi, vi) in z.iter_mut().zip(&k1) {
                        *zi += h * vi;
                    }
                    if self.eps > 0.0 {
                        self.add_noise(&mut z, n, d, h, k as u64);
                    }
                }
                Scheme::Rk4 => {
                    let half = t + 0.5 * h;
                    eval(t, &z, &mut k1)?;
                    axpy(&mut tmp, &z, 0.5 * h, &k1);
                    eval(half, &tmp, &mut k2)?;
                    axpy(&mut tmp, &z, 0.5 * h, &k2);
                    eval(half, &tmp, &mut k3)?;
                    axpy(&mut tmp, &z, h, &k3);
                    eval(t_next, &tmp, &mut k4)?;
                    for i in 0..z.len() {
                        z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
            }
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { t: t_next });
            }
            observe(t_next, &z);
        }

        if self.extrapolate && self.t_end < 1.0 {
            let delta = 1.0 - self.t_end;
            eval(self.t_end, &z, &mut k1)?;
            for (zi, vi) in z.iter_mut().zip(&k1) {
                *zi += delta * vi;
            }
            if self.eps > 0.0 {
                self.add_noise(&mut z, n, d, delta, self.steps as u64);
            }
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { t: 1.0 });
            }
            observe(1.0, &z);
        }
        Ok(ParticleSet::from_raw(n, d, z))
    }

    fn add_noise(&self, z: &mut [f64], n: usize, d: usize, h: f64, step: u64) {
        let scale = (self.eps * h).sqrt();
        let xi = rng::standard_normals(n, d, rng::derive_seed(self.seed, step));
        for (zi, e) in z.iter_mut().zip(xi) {
            *zi += scale * e;
        }
    }
}

fn axpy(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for ((o, x), y) in out.iter_mut().zip(x).zip(y) {
        *o = x + a * y;
    }
}

/// Attach the failing time and state to an evaluation error.
fn locate(e: Error, t: f64, xs: &[f64], d: usize) -> Error {
    let state = match &e {
        Error::AtPoint { index, .. } => xs[index * d..(index + 1) * d].to_vec(),
        _ if xs.len() == d => xs.to_vec(),
        _ => Vec::new(),
    };
    Error::Integration {
        t,
        state,
        source: Box::new(e),
    }
}

/// Largest pairwise distance between rows of a row-major buffer.
pub fn spread(points: &[f64], d: usize) -> f64 {
    let n = points.len() / d;
    let mut best: f64 = 0.0;
    for i in 0..n {
        let a = &points[i * d..(i + 1) * d];
        for j in i + 1..n {
            let b = &points[j * d..(j + 1) * d];
            let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(r2);
        }
    }
    best.sqrt()
}

/// Evenly strided row indices, at most [`MAX_SPREAD_POINTS`] of them.
pub fn representatives(n: usize) -> Vec<usize> {
    if n <= MAX_SPREAD_POINTS {
        (0..n).collect()
    } else {
        (0..MAX_SPREAD_POINTS).map(|k| k * n / MAX_SPREAD_POINTS).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseReport {
    pub collapsed: bool,
    pub t_star: Option<f64>,
    pub min_spread: f64,
}

/// Tracks the spread of a fixed set of rows along a grid.
#[derive(Debug, Clone)]
pub(crate) struct SpreadTracker {
    rows: Vec<usize>,
    d: usize,
    buf: Vec<f64>,
    pub(crate) min_spread: f64,
    pub(crate) t_star: f64,
    pub(crate) initial: f64,
}

impl SpreadTracker {
    pub(crate) fn new(n: usize, d: usize) -> Self {
        let rows = representatives(n);
        SpreadTracker {
            buf: vec![0.0; rows.len() * d],
            rows,
            d,
            min_spread: f64::INFINITY,
            t_star: 0.0,
            initial: f64::NAN,
        }
    }

    /// Records the spread at `t`; only interior times compete for the minimum.
    pub(crate) fn observe(&mut self, t: f64, z: &[f64]) {
        let d = self.d;
        for (k, &i) in self.rows.iter().enumerate() {
            self.buf[k * d..(k + 1) * d].copy_from_slice(&z[i * d..(i + 1) * d]);
        }
        let s = spread(&self.buf, d);
        if t == 0.0 {
            self.initial = s;
        }
        if t > 0.0 && t < 1.0 && s < self.min_spread {
            self.min_spread = s;
            self.t_star = t;
        }
    }
}

/// Integrate `starts` (at most [`MAX_SPREAD_POINTS`] of them, strided) with
/// RK4 between consecutive times of `t_grid`, and report the smallest spread
/// seen at any grid time.
pub fn detect_collapse(
    v: &dyn VelocityField,
    starts: &ParticleSet,
    t_grid: &[f64],
    radius_tol: f64,
) -> Result<CollapseReport> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must be increasing and nonempty".into()));
    }
    if starts.dim() != v.dim() || starts.is_empty() {
        return Err(Error::InvalidArgument("starts do not match the field".into()));
    }
    let domain = v.time_domain();
    for &t in t_grid {
        domain.check(t)?;
    }
    let d = starts.dim();
    let mut z = starts.select(&representatives(starts.len())).into_vec();
    let n = z.len() / d;
    let mut k1 = vec![0.0; z.len()];
    let mut k2 = vec![0.0; z.len()];
    let mut k3 = vec![0.0; z.len()];
    let mut k4 = vec![0.0; z.len()];
    let mut tmp = vec![0.0; z.len()];
    let eval = |t: f64, x: &[f64], out: &mut [f64]| -> Result<()> {
        v.eval_batch(t, x, out).map_err(|e| locate(e, t, x, d))
    };

    let mut t_star = t_grid[0];
    let mut min_spread = spread(&z, d);
    for w in t_grid.windows(2) {
        let (t, h) = (w[0], w[1] - w[0]);
        eval(t, &z, &mut k1)?;
        axpy(&mut tmp, &z, 0.5 * h, &k1);
        eval(t + 0.5 * h, &tmp, &mut k2)?;
        axpy(&mut tmp, &z, 0.5 * h, &k2);
        eval(t + 0.5 * h, &tmp, &mut k3)?;
        axpy(&mut tmp, &z, h, &k3);
        eval(w[1], &tmp, &mut k4)?;
        for i in 0..z.len() {
            z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { t: w[1] });
        }
        let s = spread(&z, d);
        if s < min_spread {
            min_spread = s;
            t_star = w[1];
        }
    }
    debug_assert!(n > 0);
    let collapsed = min_spread < radius_tol;
    Ok(CollapseReport {
        collapsed,
        t_star: collapsed.then_some(t_star),
        min_spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::GaussianJointCoupling;
    use crate::distributions::GaussianDist;
    use crate::velocity::{FnField, GaussianVelocity, ScenarioField, ScenarioVelocity};

    #[test]
    fn constant_field_is_exact() {
        let v = FnField::constant(vec![1.0, 0.0]);
        for scheme in [Scheme::Euler, Scheme::Rk4] {
            for steps in [1, 7, 100] {
                let cfg = IntegratorConfig::new(scheme, steps);
                let tr = integrate_ode(&v, &[0.0, 0.0], &cfg).unwrap();
                let z = tr.final_state();
                assert!((z[0] - 1.0).abs() <= 4.0 * f64::EPSILON && z[1] == 0.0);
                assert_eq!(*tr.times.last().unwrap(), 1.0);
                assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
            }
        }
    }

    #[test]
    fn antipodal_until_04() {
        let v = ScenarioVelocity::new(ScenarioField::Antipodal);
        let tr = integrate_ode_until(&v, &[1.0, 1.0], 0.4, Scheme::Rk4, 400).unwrap();
        let z = tr.final_state();
        assert!((z[0] - 0.2).abs() < 1e-6 && (z[1] - 0.2).abs() < 1e-6);
        let cfg = IntegratorConfig::new(Scheme::Rk4, 10);
        assert!(matches!(integrate_ode(&v, &[1.0, 1.0], &cfg), Err(Error::SingularTime { .. })));
    }

    #[test]
    fn gaussian_1d_reaches_monotone_map() {
        let g = GaussianJointCoupling::independent(
            &GaussianDist::standard(1),
            &GaussianDist::isotropic(vec![0.0], 4.0).unwrap(),
        )
        .unwrap();
        let v = GaussianVelocity::new(g);
        let cfg = IntegratorConfig::new(Scheme::Rk4, 1000);
        for x in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let z = integrate_ode(&v, &[x], &cfg).unwrap();
            assert!((z.final_state()[0] - 2.0 * x).abs() < 1e-3);
        }
        assert!(matches!(
            integrate_ode(&v, &[0.0], &IntegratorConfig { t_end_clip: 1.0, ..cfg }),
            Err(Error::SingularTime { .. })
        ));
    }

    #[test]
    fn convergence_orders() {
        // z' = cos(t) z has z(t) = z0 exp(sin t)
        let v = FnField::new(1, |t, x, out| out[0] = t.cos() * x[0]);
        let exact = 1f64.sin().exp();
        let err = |scheme, steps| {
            let cfg = IntegratorConfig {
                t_end_clip: 1.0,
                ..IntegratorConfig::new(scheme, steps)
            };
            (integrate_ode(&v, &[1.0], &cfg).unwrap().final_state()[0] - exact).abs()
        };
        let r = err(Scheme::Rk4, 10) / err(Scheme::Rk4, 20);
        assert!((8.0..=32.0).contains(&r), "rk4 ratio {r}");
        let r = err(Scheme::Euler, 100) / err(Scheme::Euler, 200);
        assert!((1.5..=3.0).contains(&r), "euler ratio {r}");
    }

    #[test]
    fn sde_with_zero_noise_is_euler() {
        let v = FnField::new(2, |t, x, out| {
            out[0] = -t * x[0];
            out[1] = 0.5 * x[1];
        });
        let cfg = IntegratorConfig::new(Scheme::Euler, 37);
        let a = integrate_ode(&v, &[0.3, -1.2], &cfg).unwrap();
        let b = integrate_sde(&v, 0.0, &[0.3, -1.2], &cfg).unwrap();
        assert_eq!(a, b);
        let rk = IntegratorConfig::new(Scheme::Rk4, 37);
        let c = integrate_sde(&v, 0.0, &[0.3, -1.2], &rk).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn brownian_variance() {
        let v = FnField::zero(2);
        let starts = ParticleSet::zeros(10_000, 2);
        let cfg = IntegratorConfig {
            seed: 3,
            ..IntegratorConfig::new(Scheme::Euler, 20)
        };
        let y = integrate_particles_sde(&v, 1.0, &starts, &cfg).unwrap();
        for s in y.std_dev() {
            assert!((s * s - 1.0).abs() < 0.05);
        }
        let again = integrate_particles_sde(&v, 1.0, &starts, &cfg).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn failing_evaluation_is_located() {
        let v = ScenarioVelocity::new(ScenarioField::DisconnectedOpt);
        let starts = ParticleSet::from_rows(&[[-2.0, 0.0], [0.0, 0.0]]).unwrap();
        let err = integrate_particles(&v, &starts, &IntegratorConfig::default()).unwrap_err();
        match err {
            Error::Integration { t, state, .. } => {
                assert_eq!(t, 0.0);
                assert_eq!(state, vec![0.0, 0.0]);
            }
            e => panic!("unexpected {e}"),
        }
        let blow = FnField::new(1, |_, x, out| out[0] = 1e308 * x[0]);
        let err = integrate_ode(&blow, &[1e10], &IntegratorConfig::new(Scheme::Euler, 10));
        assert!(matches!(err, Err(Error::Divergence { .. })));
    }

    fn circle(n: usize) -> ParticleSet {
        let rows: Vec<[f64; 2]> = (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64;
                [a.cos(), a.sin()]
            })
            .collect();
        ParticleSet::from_rows(&rows).unwrap()
    }

    #[test]
    fn collapse_examples() {
        let grid: Vec<f64> = (0..=499).map(|k| k as f64 * 1e-3).collect();
        let v = ScenarioVelocity::new(ScenarioField::Antipodal);
        let r = detect_collapse(&v, &circle(50), &grid, 1e-2).unwrap();
        assert!(r.collapsed && r.min_spread < 1e-2);
        assert!((r.t_star.unwrap() - 0.5).abs() < 0.01);

        let c = circle(50);
        let r = detect_collapse(&FnField::constant(vec![1.0, 2.0]), &c, &grid, 1e-2).unwrap();
        assert!(!r.collapsed && r.t_star.is_none());
        assert!((r.min_spread - spread(c.as_slice(), 2)).abs() <= 8.0 * f64::EPSILON);

        let g = GaussianJointCoupling::independent(&GaussianDist::standard(2), &GaussianDist::standard(2))
            .unwrap();
        let full: Vec<f64> = (0..=999).map(|k| k as f64 * 1e-3).collect();
        let r = detect_collapse(&GaussianVelocity::new(g), &circle(50), &full, 1e-2).unwrap();
        assert!(!r.collapsed);
    }

    #[test]
    fn straight_fields_need_one_step() {
        let v = ScenarioVelocity::new(ScenarioField::DisconnectedNonopt);
        let starts = ParticleSet::from_rows(&[[0.1, 1.1], [-0.2, -0.9]]).unwrap();
        let one = integrate_particles(&v, &starts, &IntegratorConfig::new(Scheme::Euler, 1)).unwrap();
        let many = integrate_particles(&v, &starts, &IntegratorConfig::new(Scheme::Rk4, 1000)).unwrap();
        for (a, b) in one.as_slice().iter().zip(many.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
