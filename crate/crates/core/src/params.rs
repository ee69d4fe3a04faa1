//! Circuit and control-objective constants of the single-phase boost rectifier.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lumped parameters of the full-bridge rectifier with resistive and
/// constant-power DC loads.
///
/// `i_amp` (the unity-power-factor current amplitude) is derived from the
/// power balance; call [`ConverterParams::refresh_feasible_current`] after
/// editing any circuit field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterParams {
    /// L (H)
    pub inductance: f64,
    /// C (F)
    pub capacitance: f64,
    /// G (S)
    pub conductance: f64,
    /// P (W)
    pub cpl_power: f64,
    /// r (Ω), all resistive losses lumped together
    pub resistance: f64,
    /// E (V), amplitude of the AC source
    pub source_amplitude: f64,
    /// ω (rad/s)
    pub omega: f64,
    /// V_d (V)
    pub v_ref: f64,
    /// I_d (A)
    pub i_amp: f64,
    /// Carrier frequency of the PWM (Hz)
    pub f_sw: f64,
    /// Peak AC current limit (A)
    pub i_limit: f64,
    /// Lower clamp on the voltage seen by the CPL divisor (V)
    pub v_min: f64,
}

impl Default for ConverterParams {
    fn default() -> Self {
        let mut p = ConverterParams {
            inductance: 1e-3,
            capacitance: 4560e-6,
            conductance: 0.01,
            cpl_power: 25.0,
            resistance: 0.08,
            source_amplitude: 28.0 * 2f64.sqrt(),
            omega: 2.0 * PI * 50.0,
            v_ref: 48.0,
            i_amp: 0.0,
            f_sw: 20e3,
            i_limit: 4.0,
            v_min: 5.0,
        };
        p.i_amp = feasible_current(&p).expect("default operating point is feasible");
        p
    }
}

impl ConverterParams {
    /// AC period T = 2π/ω.
    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inductance", self.inductance),
            ("capacitance", self.capacitance),
            ("omega", self.omega),
            ("f_sw", self.f_sw),
            ("v_min", self.v_min),
            ("v_ref", self.v_ref),
            ("i_limit", self.i_limit),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {value}")));
            }
        }
        let non_negative = [
            ("conductance", self.conductance),
            ("cpl_power", self.cpl_power),
            ("resistance", self.resistance),
            ("source_amplitude", self.source_amplitude),
            ("i_amp", self.i_amp),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {value}")));
            }
        }
        Ok(())
    }

    pub fn refresh_feasible_current(&mut self) -> Result<()> {
        self.i_amp = feasible_current(self)?;
        Ok(())
    }

    /// DC current drawn by the loads at voltage `v`.
    pub fn load_current(&self, v: f64) -> f64 {
        self.conductance * v + cpl_current(v, self.cpl_power, self.v_min)
    }
}

/// Current of the constant-power load with the divisor clamped at `v_min`.
pub fn cpl_current(v: f64, power: f64, v_min: f64) -> f64 {
    power / v.max(v_min)
}

/// Smaller root of the power balance ½·E·I = ½·r·I² + G·V_d² + P.
///
/// The r → 0 limit is handled in the numerically stable form
/// I = 2c / (E/2 + √disc), which also covers r = 0 exactly.
pub fn feasible_current(p: &ConverterParams) -> Result<f64> {
    let a = 0.5 * p.resistance;
    let b = 0.5 * p.source_amplitude;
    let c = p.conductance * p.v_ref * p.v_ref + p.cpl_power;
    let discriminant = b * b - 4.0 * a * c;
    if discriminant < 0.0 {
        return Err(Error::InfeasibleOperatingPoint { discriminant });
    }
    Ok(2.0 * c / (b + discriminant.sqrt()))
}

/// Steady SPWM input (ū1, ū2) that holds the rectifier at (I_d sin ωt, V_d).
pub fn nominal_inputs(p: &ConverterParams) -> [f64; 2] {
    if p.i_amp <= 0.0 {
        return [0.0, 0.0];
    }
    let u1 = -2.0 * (p.conductance * p.v_ref + p.cpl_power / p.v_ref) / p.i_amp;
    let u2 = p.omega * p.inductance * p.i_amp / p.v_ref;
    [u1, u2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn default_feasible_current() {
        let p = ConverterParams::default();
        assert_abs_diff_eq!(p.i_amp, 2.44, epsilon = 0.01);
    }

    #[test]
    fn feasible_current_without_resistance() {
        let p = ConverterParams { resistance: 0.0, ..ConverterParams::default() };
        let expected = 2.0 * (0.01 * 48.0 * 48.0 + 25.0) / (28.0 * 2f64.sqrt());
        assert_abs_diff_eq!(feasible_current(&p).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 2.426, epsilon = 1e-3);
    }

    #[test]
    fn feasible_current_unloaded() {
        let p = ConverterParams { cpl_power: 0.0, conductance: 0.0, ..ConverterParams::default() };
        assert_eq!(feasible_current(&p).unwrap(), 0.0);
    }

    #[test]
    fn feasible_current_rejects_negative_discriminant() {
        let p = ConverterParams { cpl_power: 1e4, ..ConverterParams::default() };
        assert!(matches!(feasible_current(&p), Err(Error::InfeasibleOperatingPoint { .. })));
    }

    #[test]
    fn root_satisfies_power_balance() {
        let p = ConverterParams::default();
        let i = p.i_amp;
        let lhs = 0.5 * p.source_amplitude * i;
        let rhs = 0.5 * p.resistance * i * i + p.conductance * p.v_ref.powi(2) + p.cpl_power;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn nominal_inputs_at_defaults() {
        // Evaluated with I_d = 2.44 the formulas give (-0.8203, 0.01597); the
        // exact root 2.4384 shifts the first entry in the fourth decimal.
        let p = ConverterParams { i_amp: 2.44, ..ConverterParams::default() };
        let [u1, u2] = nominal_inputs(&p);
        assert_abs_diff_eq!(u1, -0.8203, epsilon = 1e-4);
        assert_abs_diff_eq!(u2, 0.01597, epsilon = 1e-5);
    }

    #[test]
    fn cpl_guard() {
        assert_abs_diff_eq!(cpl_current(48.0, 25.0, 5.0), 0.520833, epsilon = 1e-6);
        assert_eq!(cpl_current(48.0, 0.0, 5.0), 0.0);
        assert_eq!(cpl_current(0.1, 25.0, 5.0), 5.0);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let p = ConverterParams { inductance: 0.0, ..ConverterParams::default() };
        assert!(p.validate().is_err());
        let p = ConverterParams { resistance: -1.0, ..ConverterParams::default() };
        assert!(p.validate().is_err());
        assert!(ConverterParams::default().validate().is_ok());
    }
}
