//! Comparison controllers: the IDA-PBC law and the cascade PI + PR
//! controller, plus the ideal grid-phase source used in place of a PLL.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::params::{cpl_current, ConverterParams};

/// Grid phase ωt wrapped to [0, 2π).
pub fn ideal_phase(t: f64, omega: f64) -> f64 {
    let theta = (omega * t).rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2π.
    if theta >= 2.0 * PI { 0.0 } else { theta }
}

/// IDA-PBC inputs `u1 = −2·i_ℓ/I_d`, `u2 = ωLI_d/V_d` from the controller's
/// view of the parameters.
pub fn ida_pbc(i_ell: f64, p: &ConverterParams) -> Result<[f64; 2]> {
    if !(p.i_amp > 0.0) {
        return Err(Error::config("IDA-PBC needs a positive current amplitude"));
    }
    Ok([-2.0 * i_ell / p.i_amp, p.omega * p.inductance * p.i_amp / p.v_ref])
}

/// Mean load current `G·v + P/max(v, v_min)` over a window of voltage samples.
pub fn dc_load_current_avg(v: &[f64], p: &ConverterParams) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&v| p.conductance * v + cpl_current(v, p.cpl_power, p.v_min)).sum::<f64>() / v.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiPrGains {
    pub kvp: f64,
    pub kvi: f64,
    pub kip: f64,
    pub kir: f64,
    /// Resonant frequency ω₀ (rad/s).
    pub omega0: f64,
    /// Resonant bandwidth ω_c (rad/s).
    pub omegac: f64,
}

impl Default for PiPrGains {
    fn default() -> Self {
        let omega0 = 2.0 * PI * 50.0;
        PiPrGains { kvp: 1.0, kvi: 2.0, kip: 0.04, kir: 4.0, omega0, omegac: 0.01 * omega0 }
    }
}

impl PiPrGains {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("kvp", self.kvp), ("kvi", self.kvi), ("kip", self.kip), ("kir", self.kir)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {g}")));
            }
        }
        if !(self.omega0 > 0.0 && self.omegac > 0.0) {
            return Err(Error::config("omega0 and omegac must be positive"));
        }
        Ok(())
    }
}

/// Second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, omega: f64, dt: f64) -> Complex64 {
        let zi = Complex64::from_polar(1.0, -omega * dt);
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = 1.0 + self.a[0] * zi + self.a[1] * zi * zi;
        num / den
    }

    pub fn poles(&self) -> [Complex64; 2] {
        let (b, c) = (self.a[0], self.a[1]);
        let disc = Complex64::new(b * b - 4.0 * c, 0.0).sqrt();
        [(-b + disc) / 2.0, (-b - disc) / 2.0]
    }

    /// Output for input `x` from transposed direct-form-II state `s`, and
    /// the state after the sample.
    fn eval(&self, s: [f64; 2], x: f64) -> (f64, [f64; 2]) {
        let y = self.b[0] * x + s[0];
        (y, [self.b[1] * x - self.a[0] * y + s[1], self.b[2] * x - self.a[1] * y])
    }

    /// Filters `xs` from rest.
    pub fn filter(&self, xs: &[f64]) -> Vec<f64> {
        let mut s = [0.0; 2];
        xs.iter()
            .map(|&x| {
                let (y, next) = self.eval(s, x);
                s = next;
                y
            })
            .collect()
    }
}

/// Resonant term `2K_ir ω_c s / (s² + 2ω_c s + ω₀²)` by the bilinear
/// transform prewarped at ω₀, so the discrete gain at ω₀ equals K_ir.
pub fn discretize_pr(g: &PiPrGains, dt: f64) -> Result<Biquad> {
    g.validate()?;
    if !(dt > 0.0 && g.omega0 * dt < PI) {
        return Err(Error::config(format!("PR sample time {dt} s must satisfy 0 < ω₀·dt < π")));
    }
    let k = g.omega0 / (0.5 * g.omega0 * dt).tan();
    let w2 = g.omega0 * g.omega0;
    let a0 = k * k + 2.0 * g.omegac * k + w2;
    let num = 2.0 * g.kir * g.omegac * k / a0;
    Ok(Biquad {
        b: [num, 0.0, -num],
        a: [(2.0 * w2 - 2.0 * k * k) / a0, (k * k - 2.0 * g.omegac * k + w2) / a0],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PiPrState {
    /// Outer-loop integrator (A).
    pub integ_v: f64,
    pub pr: [f64; 2],
    /// Current amplitude command I_g (A).
    pub i_g: f64,
    /// Whether the duty saturated since the last outer update.
    pub saturated: bool,
}

/// Cascade controller: an outer PI on the period-mean DC voltage sets the
/// amplitude I_g of the current reference `I_g·sin θ`; an inner P + resonant
/// loop tracks it at the sampling rate.
#[derive(Clone, Debug)]
pub struct PiPrController {
    gains: PiPrGains,
    pr: Biquad,
    v_ref: f64,
    pub state: PiPrState,
}

impl PiPrController {
    /// `i_g0` presets the integrator so the first reference amplitude is `i_g0`.
    pub fn new(gains: PiPrGains, dt: f64, v_ref: f64, i_g0: f64) -> Result<Self> {
        let pr = discretize_pr(&gains, dt)?;
        let state = PiPrState { integ_v: i_g0, i_g: i_g0, ..PiPrState::default() };
        Ok(PiPrController { gains, pr, v_ref, state })
    }

    pub fn gains(&self) -> &PiPrGains {
        &self.gains
    }

    /// Outer-loop update from the mean DC voltage of the last `period` seconds.
    /// The integrator is frozen if the duty saturated in that interval.
    pub fn update_voltage(&mut self, v_mean: f64, period: f64) -> f64 {
        let e = self.v_ref - v_mean;
        if !self.state.saturated {
            self.state.integ_v += self.gains.kvi * e * period;
        }
        self.state.saturated = false;
        self.state.i_g = self.gains.kvp * e + self.state.integ_v;
        self.state.i_g
    }

    /// Inner-loop duty for the measured current at grid phase `theta`. A
    /// positive tracking error raises µ; the resonant state is held while
    /// the output saturates.
    pub fn step(&mut self, i_meas: f64, theta: f64) -> f64 {
        let e = self.state.i_g * theta.sin() - i_meas;
        let (resonant, next) = self.pr.eval(self.state.pr, e);
        let mu = self.gains.kip * e + resonant;
        if mu.abs() > 1.0 {
            self.state.saturated = true;
            mu.clamp(-1.0, 1.0)
        } else {
            self.state.pr = next;
            mu
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const DT: f64 = 200e-6;

    #[test]
    fn phase_examples() {
        let omega = 2.0 * PI * 50.0;
        assert_eq!(ideal_phase(0.0, omega), 0.0);
        assert_abs_diff_eq!(ideal_phase(0.02, omega), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ideal_phase(0.005, omega), PI / 2.0, epsilon = 1e-12);
        assert!(ideal_phase(-0.001, omega) > 0.0);
    }

    #[test]
    fn ida_pbc_examples() {
        let p = ConverterParams { i_amp: 2.44, ..ConverterParams::default() };
        let i_ell = 0.01 * 48.0 + 25.0 / 48.0;
        assert_abs_diff_eq!(i_ell, 1.0008, epsilon = 1e-4);
        let u = ida_pbc(i_ell, &p).unwrap();
        assert_abs_diff_eq!(u[0], -0.8203, epsilon = 1e-4);
        assert_abs_diff_eq!(u[1], 0.01597, epsilon = 1e-5);
        let u0 = ida_pbc(0.0, &p).unwrap();
        assert_eq!(u0[0], 0.0);
        assert_eq!(u0[1], u[1]);
        assert!(ida_pbc(1.0, &ConverterParams { i_amp: 0.0, ..p }).is_err());
    }

    #[test]
    fn load_current_examples() {
        let p = ConverterParams::default();
        assert_abs_diff_eq!(dc_load_current_avg(&[48.0; 100], &p), 1.000833, epsilon = 1e-6);
        let unloaded = ConverterParams { cpl_power: 0.0, ..p };
        assert_abs_diff_eq!(dc_load_current_avg(&[48.0; 100], &unloaded), 0.48, epsilon = 1e-12);
        let rippled: Vec<f64> = (0..100).map(|k| 48.0 + 2.0 * (4.0 * PI * k as f64 / 100.0).sin()).collect();
        let i = dc_load_current_avg(&rippled, &p);
        assert!(i > 1.000833 && i < 1.01, "{i}");
    }

    #[test]
    fn zero_errors_give_zero_duty() {
        let mut c = PiPrController::new(PiPrGains::default(), DT, 48.0, 0.0).unwrap();
        c.update_voltage(48.0, 0.02);
        for k in 0..500 {
            assert_eq!(c.step(0.0, k as f64 * 0.0628), 0.0);
        }
    }

    #[test]
    fn outer_pi_step_response() {
        let mut c = PiPrController::new(PiPrGains::default(), DT, 48.0, 0.0).unwrap();
        let mut i_g = 0.0;
        for _ in 0..50 {
            i_g = c.update_voltage(47.0, 0.02);
        }
        assert_abs_diff_eq!(i_g, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn resonant_gain_at_omega0() {
        let g = PiPrGains::default();
        let pr = discretize_pr(&g, DT).unwrap();
        let h = pr.response(g.omega0, DT);
        assert_abs_diff_eq!(h.re, g.kir, epsilon = 1e-6 * g.kir);
        assert_abs_diff_eq!(h.im, 0.0, epsilon = 1e-6 * g.kir);
        let total = Complex64::new(g.kip, 0.0) + h;
        assert!((total.norm() - (g.kip + g.kir)).abs() <= 0.02 * (g.kip + g.kir));
        assert!(pr.response(0.0, DT).norm() < 1e-9);
    }

    #[test]
    fn poles_approach_continuous_limit() {
        let g = PiPrGains::default();
        // s² + 2ω_c s + ω₀² = 0
        let s = Complex64::new(-g.omegac, (g.omega0 * g.omega0 - g.omegac * g.omegac).sqrt());
        for dt in [1e-4, 1e-5, 1e-6] {
            let pr = discretize_pr(&g, dt).unwrap();
            let target = (s * dt).exp();
            let err = pr.poles().iter().map(|p| (p - target).norm().min((p - target.conj()).norm())).fold(0.0, f64::max);
            assert!(err < 1e-6 * (dt / 1e-6).max(1.0), "dt={dt}: {err}");
        }
        assert!(discretize_pr(&g, 0.011).is_err());
    }

    #[test]
    fn resonant_filter_is_linear() {
        let pr = discretize_pr(&PiPrGains::default(), DT).unwrap();
        let a: Vec<f64> = (0..300).map(|k| (k as f64 * 0.07).sin()).collect();
        let b: Vec<f64> = (0..300).map(|k| ((k % 17) as f64) - 8.0).collect();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ya, yb, ys) = (pr.filter(&a), pr.filter(&b), pr.filter(&sum));
        for k in 0..300 {
            assert_abs_diff_eq!(ys[k], ya[k] + yb[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn saturation_keeps_state_bounded() {
        let mut c = PiPrController::new(PiPrGains::default(), DT, 48.0, 2.4).unwrap();
        for period in 0..50 {
            c.update_voltage(10.0, 0.02);
            for k in 0..100 {
                let theta = ideal_phase((period * 100 + k) as f64 * DT, 2.0 * PI * 50.0);
                let mu = c.step(-50.0, theta);
                assert!((-1.0..=1.0).contains(&mu));
            }
        }
        assert!(c.state.integ_v.is_finite() && c.state.integ_v.abs() < 100.0);
        assert!(c.state.pr.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn zero_gains_give_zero_output() {
        let g = PiPrGains { kvp: 0.0, kvi: 0.0, kip: 0.0, kir: 0.0, ..PiPrGains::default() };
        let mut c = PiPrController::new(g, DT, 48.0, 0.0).unwrap();
        c.update_voltage(30.0, 0.02);
        for k in 0..200 {
            assert_eq!(c.step(3.0 * (k as f64).sin(), k as f64 * 0.1), 0.0);
        }
    }
}
