//! Piecewise-constant and antipodal fields of the built-in 2-D scenarios.

use serde::{Deserialize, Serialize};

use super::{check_batch, TimeDomain, VelocityField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioField {
    /// `(0,-2)` for `x1 < -1`, `(0,2)` for `x1 > 1`.
    DisconnectedOpt,
    /// `(-4,0)` for `x2 < -0.5`, `(4,0)` for `x2 > 0.5`.
    DisconnectedNonopt,
    /// `(-2,2)` for `x1 < -t`, `(2,-2)` for `x1 > t`.
    GaussLatentFp,
    /// `-2x / (1-2t)`, singular at `t = 1/2`.
    Antipodal,
}

impl ScenarioField {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioField::DisconnectedOpt => "disconnected-opt",
            ScenarioField::DisconnectedNonopt => "disconnected-nonopt",
            ScenarioField::GaussLatentFp => "gauss-latent-fp",
            ScenarioField::Antipodal => "antipodal",
        }
    }
}

/// Exact scenario field. Points in the gap between the pieces are out of
/// support; `margin` widens each piece towards the gap (never past its middle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioVelocity {
    field: ScenarioField,
    margin: f64,
}

impl ScenarioVelocity {
    pub fn new(field: ScenarioField) -> Self {
        ScenarioVelocity { field, margin: 0.0 }
    }

    pub fn with_margin(field: ScenarioField, margin: f64) -> Result<Self> {
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(Error::InvalidArgument(format!("margin {margin} must be >= 0")));
        }
        Ok(ScenarioVelocity { field, margin })
    }

    pub fn field(&self) -> ScenarioField {
        self.field
    }

    fn point(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        // split coordinate, half-width of the gap, value below / above
        let (coord, half, lo, hi) = match self.field {
            ScenarioField::DisconnectedOpt => (x[0], 1.0, [0.0, -2.0], [0.0, 2.0]),
            ScenarioField::DisconnectedNonopt => (x[1], 0.5, [-4.0, 0.0], [4.0, 0.0]),
            ScenarioField::GaussLatentFp => (x[0], t, [-2.0, 2.0], [2.0, -2.0]),
            ScenarioField::Antipodal => {
                let s = -2.0 / (1.0 - 2.0 * t);
                out[0] = s * x[0];
                out[1] = s * x[1];
                return Ok(());
            }
        };
        let edge = half - self.margin.min(half);
        if coord < -edge {
            out.copy_from_slice(&lo);
        } else if coord > edge {
            out.copy_from_slice(&hi);
        } else {
            return Err(Error::OutOfSupport { t, x: x.to_vec() });
        }
        Ok(())
    }
}

impl VelocityField for ScenarioVelocity {
    fn dim(&self) -> usize {
        2
    }

    fn time_domain(&self) -> TimeDomain {
        match self.field {
            ScenarioField::Antipodal => TimeDomain::with_singular(vec![0.5]),
            _ => TimeDomain::full(),
        }
    }

    fn eval_batch(&self, t: f64, xs: &[f64], out: &mut [f64]) -> Result<()> {
        check_batch(2, xs, out)?;
        self.time_domain().check(t)?;
        for (i, (x, o)) in xs.chunks_exact(2).zip(out.chunks_exact_mut(2)).enumerate() {
            self.point(t, x, o).map_err(|e| Error::at_point(i, e))?;
        }
        Ok(())
    }
}
