//! Rate-dependent tissue fracture force model.
//!
//! Before fracture the tissue responds with a static cubic stiffness curve plus a
//! relaxation term that grows with indentation rate:
//!
//! ```text
//! F1(x, v) = Fs(x) + K(x) v tau_s (1 - exp(-x / (v tau_s)))
//! ```
//!
//! Fracture happens once the indentation exceeds the rate-dependent threshold
//! `x_f(v)`. From then on the force follows a linear decay from the fracture
//! force `F_f(v*)` with slope `a(v*)`, where `v*` is the indentation rate latched
//! at the fracture instant:
//!
//! ```text
//! F2(x) = F_f(v*) + a(v*) (x - x_f(v*))
//! ```
//!
//! Positions are in mm, rates in mm/s and forces in model-force units. Haptic
//! output scaling to newtons lives in [`crate::haptics`].
//!
//! With the default coefficients and `tau_s = 1 s` the force drops at the
//! fracture instant for every rate in `[0, 200]` mm/s; at `v = 0` the drop is
//! from `Fs(19.21) ~ 995.3` to `F_f(0) = 697.1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TissueError {
    #[error("{quantity} must be non-negative, got {value}")]
    Domain { quantity: &'static str, value: f64 },
    #[error("post-fracture force requested while tissue is intact")]
    NotFractured,
    #[error("invalid tissue parameter: {0}")]
    InvalidParams(String),
}

/// Coefficients of the fracture model, highest power first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TissueParams {
    /// Static force `Fs`: cubic, quadratic and linear coefficients (no constant term).
    pub fs_coeffs: [f64; 3],
    /// Fracture force `F_f`: quadratic, linear, constant.
    pub ff_coeffs: [f64; 3],
    /// Fracture displacement `x_f` in mm: quadratic, linear, constant.
    pub xf_coeffs: [f64; 3],
    /// Post-fracture slope `a`: quartic down to constant.
    pub a_coeffs: [f64; 5],
    /// Relaxation time of the rate term, seconds.
    pub tau_s: f64,
    /// Stiffness multiplier applied to every force-valued curve.
    pub sigma: f64,
}

impl Default for TissueParams {
    fn default() -> Self {
        Self {
            fs_coeffs: [0.008, 2.087, 8.766],
            ff_coeffs: [0.001, -1.176, 697.1],
            xf_coeffs: [0.0001, -0.0575, 19.21],
            a_coeffs: [1e-7, -7e-5, 0.0101, 0.0485, -79.313],
            tau_s: 1.0,
            sigma: 1.0,
        }
    }
}

/// Horner evaluation, coefficients highest power first.
fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

fn non_negative(quantity: &'static str, value: f64) -> Result<f64, TissueError> {
    if value >= 0.0 {
        Ok(value)
    } else {
        Err(TissueError::Domain { quantity, value })
    }
}

impl TissueParams {
    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<(), TissueError> {
        let finite = self
            .fs_coeffs
            .iter()
            .chain(&self.ff_coeffs)
            .chain(&self.xf_coeffs)
            .chain(&self.a_coeffs)
            .all(|c| c.is_finite());
        if !finite {
            return Err(TissueError::InvalidParams("non-finite coefficient".into()));
        }
        if !(self.tau_s > 0.0 && self.tau_s.is_finite()) {
            return Err(TissueError::InvalidParams(format!(
                "tau_s must be > 0, got {}",
                self.tau_s
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(TissueError::InvalidParams(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// `sigma * Fs(x)`.
    pub fn static_force(&self, x: f64) -> Result<f64, TissueError> {
        let x = non_negative("penetration", x)?;
        Ok(self.sigma * self.static_unscaled(x))
    }

    fn static_unscaled(&self, x: f64) -> f64 {
        let [c3, c2, c1] = self.fs_coeffs;
        horner(&[c3, c2, c1, 0.0], x)
    }

    /// Fracture threshold `x_f(v)` in mm, clamped at zero.
    pub fn fracture_displacement(&self, v: f64) -> Result<f64, TissueError> {
        let v = non_negative("velocity", v)?;
        Ok(horner(&self.xf_coeffs, v).max(0.0))
    }

    /// `sigma * F_f(v)`.
    pub fn fracture_force(&self, v: f64) -> Result<f64, TissueError> {
        let v = non_negative("velocity", v)?;
        Ok(self.sigma * horner(&self.ff_coeffs, v))
    }

    /// Post-fracture slope `a(v)`. Independent of `sigma`.
    pub fn post_slope(&self, v: f64) -> Result<f64, TissueError> {
        let v = non_negative("velocity", v)?;
        Ok(horner(&self.a_coeffs, v))
    }

    /// `K(x) = sigma * dFs/dx`.
    pub fn tangent_stiffness(&self, x: f64) -> Result<f64, TissueError> {
        let x = non_negative("penetration", x)?;
        let [c3, c2, c1] = self.fs_coeffs;
        Ok(self.sigma * horner(&[3.0 * c3, 2.0 * c2, c1], x))
    }

    /// Pre-fracture force `F1(x, v)`.
    pub fn prefracture_force(&self, x: f64, v: f64) -> Result<f64, TissueError> {
        let fs = self.static_force(x)?;
        let v = non_negative("velocity", v)?;
        let s = v * self.tau_s;
        if s == 0.0 || x == 0.0 {
            return Ok(fs);
        }
        // s * (1 - exp(-x/s)) -> x as s -> inf, -> s as s -> 0
        let relax = -s * (-x / s).exp_m1();
        Ok(fs + self.tangent_stiffness(x)? * relax)
    }

    /// Post-fracture force `F2`.
    ///
    /// Depths shallower than the latched fracture displacement are evaluated at
    /// the fracture displacement, so the force never exceeds `F_f(v*)`. The
    /// result is clamped at zero.
    pub fn postfracture_force(&self, x: f64, state: &FractureState) -> Result<f64, TissueError> {
        let x = non_negative("penetration", x)?;
        let FractureState::Fractured { v_star, x_star } = *state else {
            return Err(TissueError::NotFractured);
        };
        let depth_past = (x - x_star).max(0.0);
        let f = self.fracture_force(v_star)? + self.post_slope(v_star)? * depth_past;
        Ok(f.max(0.0))
    }

    /// One evaluation of the piecewise model, advancing the fracture latch.
    ///
    /// Negative or non-finite rates are treated as zero, which makes retraction
    /// follow the static curve. Negative depths are treated as no contact.
    pub fn step(&self, x: f64, v_filtered: f64, state: FractureState) -> (f64, FractureState) {
        let x = if x > 0.0 { x } else { 0.0 };
        let v = if v_filtered > 0.0 && v_filtered.is_finite() {
            v_filtered
        } else {
            0.0
        };
        match state {
            FractureState::Intact => {
                if x == 0.0 {
                    return (0.0, state);
                }
                let threshold = horner(&self.xf_coeffs, v).max(0.0);
                if x <= threshold {
                    let f = self.prefracture_force(x, v).unwrap_or(0.0);
                    (f, state)
                } else {
                    let latched = FractureState::Fractured {
                        v_star: v,
                        x_star: threshold,
                    };
                    let f = self.postfracture_force(x, &latched).unwrap_or(0.0);
                    (f, latched)
                }
            }
            FractureState::Fractured { .. } => {
                if x == 0.0 {
                    return (0.0, state);
                }
                let f = self.postfracture_force(x, &state).unwrap_or(0.0);
                (f, state)
            }
        }
    }
}

/// Fracture latch. Moves from `Intact` to `Fractured` once and never back.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum FractureState {
    #[default]
    Intact,
    Fractured {
        /// Indentation rate at the fracture instant, mm/s.
        v_star: f64,
        /// Fracture displacement `x_f(v_star)`, mm.
        x_star: f64,
    },
}

impl FractureState {
    pub fn is_fractured(&self) -> bool {
        matches!(self, FractureState::Fractured { .. })
    }
}
