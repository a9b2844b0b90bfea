//! Registry of the built-in couplings.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::coupling::{GaussianJointCoupling, GmmJointCoupling, ParticleCoupling};
use crate::distributions::{GaussianDist, GmmDist, ParticleSet};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::ot;
use crate::rectify::FieldSource;
use crate::rng;
use crate::velocity::ScenarioField;

/// Largest disc radius of the cluster shape in the disconnected scenarios.
pub const MAX_ETA_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    DisconnectedOpt,
    DisconnectedNonopt,
    GaussLatentFp,
    GaussLatentOpt,
    Antipodal,
    IndependentGaussian,
    IndependentGmm,
    Custom,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 8] = [
        ScenarioName::DisconnectedOpt,
        ScenarioName::DisconnectedNonopt,
        ScenarioName::GaussLatentFp,
        ScenarioName::GaussLatentOpt,
        ScenarioName::Antipodal,
        ScenarioName::IndependentGaussian,
        ScenarioName::IndependentGmm,
        ScenarioName::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::DisconnectedOpt => "disconnected-opt",
            ScenarioName::DisconnectedNonopt => "disconnected-nonopt",
            ScenarioName::GaussLatentFp => "gauss-latent-fp",
            ScenarioName::GaussLatentOpt => "gauss-latent-opt",
            ScenarioName::Antipodal => "antipodal",
            ScenarioName::IndependentGaussian => "independent-gaussian",
            ScenarioName::IndependentGmm => "independent-gmm",
            ScenarioName::Custom => "custom",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ScenarioName::DisconnectedOpt => {
                "two discs at (-2,1), (2,-1) moved vertically onto (-2,-1), (2,1); optimal, cost 4"
            }
            ScenarioName::DisconnectedNonopt => {
                "same marginals moved horizontally; straight and a fixed point, but cost 16"
            }
            ScenarioName::GaussLatentFp => {
                "N(0,I) shifted by (-2,2) left of the x1-axis and by (2,-2) right of it; fixed point, cost 8"
            }
            ScenarioName::GaussLatentOpt => {
                "exact discrete OT pairing of the gauss-latent-fp marginals"
            }
            ScenarioName::Antipodal => "X1 = -X0 with X0 ~ N(0,I); not rectifiable",
            ScenarioName::IndependentGaussian => "independent Gaussian marginals",
            ScenarioName::IndependentGmm => "independent Gaussian-mixture marginals",
            ScenarioName::Custom => "pairs read from a particle file",
        }
    }

    /// Parameter keys accepted by the scenario.
    pub fn params(self) -> &'static [&'static str] {
        match self {
            ScenarioName::DisconnectedOpt | ScenarioName::DisconnectedNonopt => &["eta_radius"],
            ScenarioName::GaussLatentFp | ScenarioName::GaussLatentOpt => &[],
            ScenarioName::Antipodal => &["dim", "smoothing"],
            ScenarioName::IndependentGaussian => &["mean0", "cov0", "mean1", "cov1"],
            ScenarioName::IndependentGmm => &["mu0", "mu1"],
            ScenarioName::Custom => &["coupling_file"],
        }
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    #[serde(default)]
    pub params: Map<String, Value>,
}

impl ScenarioSpec {
    pub fn new(name: ScenarioName) -> Self {
        ScenarioSpec {
            name,
            params: Map::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let allowed = self.name.params();
        if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "scenario '{}' has no parameter '{k}' (allowed: {})",
                self.name.as_str(),
                if allowed.is_empty() { "none".to_string() } else { allowed.join(", ") }
            )));
        }
        Ok(())
    }

    fn number(&self, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| Error::Config(format!("parameter '{key}' must be a number"))),
        }
    }

    fn vector(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.params.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => numbers(v).ok_or_else(|| {
                Error::Config(format!("parameter '{key}' must be a list of numbers"))
            }),
        }
    }

    /// A covariance given as a list (diagonal) or a list of rows.
    fn covariance(&self, key: &str, default: &[f64]) -> Result<Matrix> {
        match self.params.get(key) {
            None => Ok(Matrix::from_diagonal(&Vector::from_row_slice(default))),
            Some(v) => parse_cov(v).map_err(|e| Error::Config(format!("parameter '{key}': {e}"))),
        }
    }
}

fn numbers(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(Value::as_f64).collect()
}

fn parse_cov(v: &Value) -> std::result::Result<Matrix, String> {
    if let Some(diag) = numbers(v) {
        return Ok(Matrix::from_diagonal(&Vector::from_vec(diag)));
    }
    let rows: Vec<Vec<f64>> = v
        .as_array()
        .and_then(|a| a.iter().map(numbers).collect())
        .ok_or("expected a list of variances or a list of rows")?;
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err("covariance must be square".into());
    }
    Ok(Matrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn parse_gmm(v: &Value) -> std::result::Result<GmmDist, String> {
    let items = v.as_array().ok_or("expected a list of components")?;
    let mut comps = Vec::new();
    for it in items {
        let w = it.get("weight").and_then(Value::as_f64).unwrap_or(1.0);
        let mean = it
            .get("mean")
            .and_then(numbers)
            .ok_or("component needs a numeric 'mean' list")?;
        let cov = match it.get("cov") {
            Some(c) => parse_cov(c)?,
            None => Matrix::identity(mean.len(), mean.len()),
        };
        let g = GaussianDist::new(Vector::from_vec(mean), cov).map_err(|e| e.to_string())?;
        comps.push((w, g));
    }
    let total: f64 = comps.iter().map(|c| c.0).sum();
    comps.iter_mut().for_each(|c| c.0 /= total);
    GmmDist::new(comps).map_err(|e| e.to_string())
}

/// What is known about a built scenario.
#[derive(Debug, Clone)]
pub struct ScenarioMeta {
    pub name: ScenarioName,
    /// Optimal transport cost between the marginals, when known in closed form.
    pub optimal_cost: Option<f64>,
    /// The exact velocity field of the coupling, when available.
    pub field: Option<FieldSource>,
    /// Whether the coupling is a fixed point of rectification.
    pub fixed_point: Option<bool>,
}

/// Serializable summary of [`ScenarioMeta`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub name: ScenarioName,
    pub optimal_cost: Option<f64>,
    pub field: Option<String>,
    pub fixed_point: Option<bool>,
}

impl ScenarioMeta {
    pub fn summary(&self) -> ScenarioSummary {
        ScenarioSummary {
            name: self.name,
            optimal_cost: self.optimal_cost,
            field: self.field.as_ref().map(|f| f.label().to_string()),
            fixed_point: self.fixed_point,
        }
    }
}

/// Sample `n` pairs of the scenario.
pub fn build_scenario(
    spec: &ScenarioSpec,
    n: usize,
    seed: u64,
) -> Result<(ParticleCoupling, ScenarioMeta)> {
    spec.validate()?;
    if n == 0 && spec.name != ScenarioName::Custom {
        return Err(Error::Config("scenario needs at least one particle".into()));
    }
    let name = spec.name;
    let meta = |optimal_cost, field, fixed_point| ScenarioMeta {
        name,
        optimal_cost,
        field,
        fixed_point,
    };
    match name {
        ScenarioName::DisconnectedOpt | ScenarioName::DisconnectedNonopt => {
            let r = spec.number("eta_radius", MAX_ETA_RADIUS)?;
            if !(0.0..=MAX_ETA_RADIUS).contains(&r) {
                return Err(Error::Config(format!(
                    "eta_radius {r} must lie in [0, {MAX_ETA_RADIUS}]"
                )));
            }
            let opt = name == ScenarioName::DisconnectedOpt;
            let c = disconnected(n, r, opt, seed)?;
            let field = if opt {
                ScenarioField::DisconnectedOpt
            } else {
                ScenarioField::DisconnectedNonopt
            };
            Ok((c, meta(Some(4.0), Some(FieldSource::Scenario(field)), Some(true))))
        }
        ScenarioName::GaussLatentFp => Ok((
            gauss_latent(n, seed)?,
            meta(None, Some(FieldSource::Scenario(ScenarioField::GaussLatentFp)), Some(true)),
        )),
        ScenarioName::GaussLatentOpt => {
            let fp = gauss_latent(n, seed)?;
            let plan = ot::discrete_ot_exact(fp.x0(), fp.x1())?;
            let cost = plan.cost;
            Ok((plan.to_coupling(fp.x0(), fp.x1())?, meta(Some(cost), None, None)))
        }
        ScenarioName::Antipodal => {
            let d = spec.number("dim", 2.0)?;
            if !(d >= 1.0 && d.fract() == 0.0) {
                return Err(Error::Config(format!("dim {d} must be a positive integer")));
            }
            let d = d as usize;
            let c = spec.number("smoothing", 0.0)?;
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("smoothing {c} must be >= 0")));
            }
            let x0 = ParticleSet::new(n, d, rng::standard_normals(n, d, rng::derive_seed(seed, 0)))?;
            let x1 = x0.map_rows(|x, o| o.iter_mut().zip(x).for_each(|(o, x)| *o = -x));
            let coupling = ParticleCoupling::new(x0, x1)?;
            if c == 0.0 {
                return Ok((
                    coupling,
                    meta(
                        Some(0.0),
                        (d == 2).then_some(FieldSource::Scenario(ScenarioField::Antipodal)),
                        Some(false),
                    ),
                ));
            }
            let smoothed = crate::coupling::smooth_coupling(
                &coupling,
                c,
                crate::coupling::SmoothVariant::Additive,
                rng::derive_seed(seed, 1),
            )?;
            let g = smoothed_antipodal(d, c)?;
            let w2 = d as f64 * ((1.0 + c * c).sqrt() - 1.0).powi(2);
            Ok((smoothed, meta(Some(w2), Some(FieldSource::Gaussian(g)), Some(false))))
        }
        ScenarioName::IndependentGaussian => {
            let m0 = spec.vector("mean0", &[0.0, 0.0])?;
            let m1 = spec.vector("mean1", &[0.0, 0.0])?;
            let s0 = spec.covariance("cov0", &[1.0, 4.0])?;
            let s1 = spec.covariance("cov1", &[9.0, 1.0])?;
            let g0 = GaussianDist::new(Vector::from_vec(m0), s0)?;
            let g1 = GaussianDist::new(Vector::from_vec(m1), s1)?;
            let cost = ot::bures_wasserstein(&g0, &g1)?;
            let g = GaussianJointCoupling::independent(&g0, &g1)?;
            Ok((
                g.to_particles(n, seed)?,
                meta(Some(cost), Some(FieldSource::Gaussian(g)), Some(false)),
            ))
        }
        ScenarioName::IndependentGmm => {
            let mu0 = match spec.params.get("mu0") {
                Some(v) => parse_gmm(v).map_err(|e| Error::Config(format!("parameter 'mu0': {e}")))?,
                None => GmmDist::uniform(vec![GaussianDist::standard(2)])?,
            };
            let mu1 = match spec.params.get("mu1") {
                Some(v) => parse_gmm(v).map_err(|e| Error::Config(format!("parameter 'mu1': {e}")))?,
                None => default_gmm_target()?,
            };
            let g = GmmJointCoupling::independent(&mu0, &mu1)?;
            Ok((
                g.to_particles(n, seed)?,
                meta(None, Some(FieldSource::Gmm(g)), Some(false)),
            ))
        }
        ScenarioName::Custom => {
            let path = spec
                .params
                .get("coupling_file")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Config("custom scenario needs 'coupling_file'".into()))?;
            let c = ParticleCoupling::load(path)?;
            if n != 0 && n != c.len() {
                return Err(Error::Config(format!(
                    "coupling file holds {} pairs but {n} were requested",
                    c.len()
                )));
            }
            Ok((c, meta(None, None, None)))
        }
    }
}

/// Fresh samples of both marginals, without the pairing.
pub fn sample_marginals(
    spec: &ScenarioSpec,
    n: usize,
    seed: u64,
) -> Result<Option<(ParticleSet, ParticleSet)>> {
    let cheap = match spec.name {
        ScenarioName::Custom => return Ok(None),
        // same marginals, no assignment needed
        ScenarioName::GaussLatentOpt => ScenarioSpec::new(ScenarioName::GaussLatentFp),
        _ => spec.clone(),
    };
    let (a, _) = build_scenario(&cheap, n, seed)?;
    let (b, _) = build_scenario(&cheap, n, rng::derive_seed(seed, 1))?;
    Ok(Some((a.x0().clone(), b.x1().clone())))
}

/// `N(0,I) -> 1/2 N((-2,0), I/4) + 1/2 N((2,0), I/4)`.
pub fn default_gmm_target() -> Result<GmmDist> {
    GmmDist::uniform(vec![
        GaussianDist::isotropic(vec![-2.0, 0.0], 0.25)?,
        GaussianDist::isotropic(vec![2.0, 0.0], 0.25)?,
    ])
}

/// Joint law of `(X0 + cW, -X0)` with `X0, W ~ N(0, I_d)`.
pub fn smoothed_antipodal(d: usize, c: f64) -> Result<GaussianJointCoupling> {
    let id = Matrix::identity(d, d);
    GaussianJointCoupling::new(
        Vector::zeros(d),
        Vector::zeros(d),
        &id * (1.0 + c * c),
        id.clone(),
        -id,
    )
}

fn disconnected(n: usize, r: f64, opt: bool, seed: u64) -> Result<ParticleCoupling> {
    let u = rng::uniforms(2 * n, rng::derive_seed(seed, 0));
    let mut x0 = Vec::with_capacity(2 * n);
    let mut x1 = Vec::with_capacity(2 * n);
    for i in 0..n {
        let rad = r * u[2 * i].sqrt();
        let ang = TAU * u[2 * i + 1];
        let (ex, ey) = (rad * ang.cos(), rad * ang.sin());
        // even rows in the left cluster, odd rows in the right one
        let (cx, cy) = if i % 2 == 0 { (-2.0, 1.0) } else { (2.0, -1.0) };
        let (p, q) = (cx + ex, cy + ey);
        let (dx, dy) = match (opt, i % 2 == 0) {
            (true, true) => (0.0, -2.0),
            (true, false) => (0.0, 2.0),
            (false, true) => (4.0, 0.0),
            (false, false) => (-4.0, 0.0),
        };
        x0.extend([p, q]);
        x1.extend([p + dx, q + dy]);
    }
    ParticleCoupling::new(ParticleSet::new(n, 2, x0)?, ParticleSet::new(n, 2, x1)?)
}

fn gauss_latent(n: usize, seed: u64) -> Result<ParticleCoupling> {
    let x0 = ParticleSet::new(n, 2, rng::standard_normals(n, 2, rng::derive_seed(seed, 0)))?;
    let x1 = x0.map_rows(|x, o| {
        let s = if x[0] < 0.0 { 1.0 } else { -1.0 };
        o[0] = x[0] - 2.0 * s;
        o[1] = x[1] + 2.0 * s;
    });
    ParticleCoupling::new(x0, x1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn names_round_trip() {
        for n in ScenarioName::ALL {
            assert_eq!(n.as_str().parse::<ScenarioName>().unwrap(), n);
            let s = serde_json::to_string(&n).unwrap();
            assert_eq!(s, format!("\"{}\"", n.as_str()));
        }
        assert!("nope".parse::<ScenarioName>().is_err());
    }

    #[test]
    fn disconnected_pairings() {
        let spec = ScenarioSpec::new(ScenarioName::DisconnectedNonopt);
        let (c, meta) = build_scenario(&spec, 1000, 1).unwrap();
        for (a, b) in c.x0().rows().zip(c.x1().rows()) {
            let dx = if a[1] > 0.0 { 4.0 } else { -4.0 };
            assert_eq!(b[0], a[0] + dx);
            assert_eq!(b[1], a[1]);
            assert!(((a[0].abs() - 2.0).powi(2) + (a[1].abs() - 1.0).powi(2)).sqrt() <= 0.3);
        }
        assert_eq!(ot::transport_cost(&c), 16.0);
        assert_eq!(meta.optimal_cost, Some(4.0));
        let (c, _) = build_scenario(&ScenarioSpec::new(ScenarioName::DisconnectedOpt), 1000, 1).unwrap();
        assert_eq!(ot::transport_cost(&c), 4.0);
    }

    #[test]
    fn antipodal_rows() {
        let (c, meta) = build_scenario(&ScenarioSpec::new(ScenarioName::Antipodal), 77, 3).unwrap();
        for (a, b) in c.x0().rows().zip(c.x1().rows()) {
            assert_eq!(b, &[-a[0], -a[1]]);
        }
        assert_eq!(meta.fixed_point, Some(false));
        let spec = ScenarioSpec::new(ScenarioName::Antipodal)
            .with_param("dim", json!(1))
            .with_param("smoothing", json!(0.1));
        let (c, meta) = build_scenario(&spec, 10, 3).unwrap();
        assert_eq!(c.dim(), 1);
        assert!(matches!(meta.field, Some(FieldSource::Gaussian(_))));
    }

    #[test]
    fn gauss_latent_cost() {
        let (c, _) = build_scenario(&ScenarioSpec::new(ScenarioName::GaussLatentFp), 500, 2).unwrap();
        for d in c.displacements().rows() {
            assert!((d[0] * d[0] + d[1] * d[1] - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn params_are_validated() {
        let bad = ScenarioSpec::new(ScenarioName::GaussLatentFp).with_param("x", json!(1));
        assert!(matches!(build_scenario(&bad, 10, 0), Err(Error::Config(_))));
        let bad = ScenarioSpec::new(ScenarioName::DisconnectedOpt).with_param("eta_radius", json!(0.5));
        assert!(build_scenario(&bad, 10, 0).is_err());
        let bad = ScenarioSpec::new(ScenarioName::IndependentGaussian).with_param("cov0", json!("x"));
        assert!(build_scenario(&bad, 10, 0).is_err());
        assert!(build_scenario(&ScenarioSpec::new(ScenarioName::Custom), 10, 0).is_err());
    }

    #[test]
    fn independent_scenarios() {
        let spec = ScenarioSpec::new(ScenarioName::IndependentGaussian)
            .with_param("cov0", json!([[2.0, 0.5], [0.5, 1.0]]));
        let (c, meta) = build_scenario(&spec, 100, 0).unwrap();
        assert_eq!(c.len(), 100);
        assert!(meta.optimal_cost.unwrap() > 0.0);
        let spec = ScenarioSpec::new(ScenarioName::IndependentGmm).with_param(
            "mu1",
            json!([{"weight": 1, "mean": [3, 0]}, {"weight": 3, "mean": [-3, 0], "cov": [0.5, 0.5]}]),
        );
        let (c, _) = build_scenario(&spec, 4000, 0).unwrap();
        let left = c.x1().rows().filter(|r| r[0] < 0.0).count() as f64 / 4000.0;
        assert!((left - 0.75).abs() < 0.03);
    }
}
