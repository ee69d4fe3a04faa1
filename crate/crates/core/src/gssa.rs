//! Generalized state-space averaging over sampled windows, the lifted
//! observable vector, phasor-to-waveform reconstruction and the
//! time-invariant averaged model used as a physics oracle.

use std::io::Write;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::params::{cpl_current, ConverterParams};
use crate::plant::{bridge_switching, parse_floats, Sample};

/// Number of samples in one AC period, requiring `N·dt = 2π/ω`.
pub fn samples_per_period(omega: f64, dt: f64) -> Result<usize> {
    let period = 2.0 * std::f64::consts::PI / omega;
    crate::plant::integer_ratio(period, dt)
        .map(|n| n as usize)
        .ok_or_else(|| Error::config(format!("sample period {dt} does not divide the AC period {period}")))
}

/// Index-`h` average of one window of samples:
/// `(1/N) Σ y[j] · exp(-j·ω·h·j·Δt)` over absolute sample indices
/// `first_index .. first_index + N`.
pub fn gssa(window: &[f64], first_index: i64, h: i32, omega: f64, dt: f64) -> Result<Complex64> {
    let n = samples_per_period(omega, dt)?;
    if window.len() != n {
        return Err(Error::config(format!(
            "GSSA window holds {} samples, one period needs {n}",
            window.len()
        )));
    }
    Ok(harmonic_average(window, first_index, h, omega, dt))
}

fn harmonic_average(window: &[f64], first_index: i64, h: i32, omega: f64, dt: f64) -> Complex64 {
    if h == 0 {
        return Complex64::new(window.iter().sum::<f64>() / window.len() as f64, 0.0);
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, y) in window.iter().enumerate() {
        let phase = -omega * h as f64 * (first_index + k as i64) as f64 * dt;
        acc += Complex64::from_polar(*y, phase);
    }
    acc / window.len() as f64
}

/// Lifted observable `[Im⟨i⟩₁, Re⟨i⟩₁, ⟨v⟩₀, ⟨1/v⟩₀]`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LiftedState(pub [f64; 4]);

impl LiftedState {
    pub fn new(z1: f64, z2: f64, z3: f64, z4: f64) -> Self {
        LiftedState([z1, z2, z3, z4])
    }

    pub fn im_current(&self) -> f64 {
        self.0[0]
    }

    pub fn re_current(&self) -> f64 {
        self.0[1]
    }

    pub fn v_mean(&self) -> f64 {
        self.0[2]
    }

    pub fn inv_v_mean(&self) -> f64 {
        self.0[3]
    }

    /// ⟨i⟩₁ as a complex phasor.
    pub fn current_phasor(&self) -> Complex64 {
        Complex64::new(self.0[1], self.0[0])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|z| z.is_finite())
    }
}

/// Lifts one period of samples. The window must hold exactly one AC period
/// of consecutive samples.
pub fn lift(window: &[Sample], omega: f64, dt: f64, v_min: f64) -> Result<LiftedState> {
    let first = window.first().ok_or_else(|| Error::config("empty lifting window"))?;
    if let Some(bad) = window.iter().find(|s| s.v < v_min) {
        return Err(Error::DegenerateState { v: bad.v, v_min });
    }
    let i: Vec<f64> = window.iter().map(|s| s.i).collect();
    let v: Vec<f64> = window.iter().map(|s| s.v).collect();
    let inv_v: Vec<f64> = v.iter().map(|v| 1.0 / v).collect();
    let i1 = gssa(&i, first.index, 1, omega, dt)?;
    let v0 = gssa(&v, first.index, 0, omega, dt)?.re;
    let inv_v0 = gssa(&inv_v, first.index, 0, omega, dt)?.re;
    Ok(LiftedState([i1.im, i1.re, v0, inv_v0]))
}

/// Instantaneous current implied by a first-harmonic phasor:
/// `i1·e^{jωt} + conj(i1)·e^{-jωt}`.
pub fn reconstruct_current(i1: Complex64, t: f64, omega: f64) -> f64 {
    let (s, c) = (omega * t).sin_cos();
    2.0 * (i1.re * c - i1.im * s)
}

/// Lifted reference `[-I_d/2, 0, V_d, 1/V_d]`.
pub fn reference_vector(p: &ConverterParams) -> LiftedState {
    LiftedState([-p.i_amp / 2.0, 0.0, p.v_ref, 1.0 / p.v_ref])
}

/// State of the harmonic-balance model: `⟨i⟩₁` and `⟨v⟩₀`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragedPhysState {
    pub i1: Complex64,
    pub v0: f64,
}

impl AveragedPhysState {
    pub fn from_lifted(z: &LiftedState) -> Self {
        AveragedPhysState { i1: z.current_phasor(), v0: z.v_mean() }
    }

    pub fn to_lifted(self) -> LiftedState {
        LiftedState([self.i1.im, self.i1.re, self.v0, 1.0 / self.v0])
    }
}

/// Time derivative of the first-harmonic/zero-harmonic averaged model for
/// a constant SPWM input `u`.
///
/// With `w` the first-harmonic average of the bridge switching function,
///
/// ```text
/// -L d⟨i⟩₁/dt = w·⟨v⟩₀ + r·⟨i⟩₁ + jωL·⟨i⟩₁ + jE/2
///  C d⟨v⟩₀/dt = w·⟨i⟩₋₁ + w*·⟨i⟩₁ - G·⟨v⟩₀ - P/⟨v⟩₀
/// ```
///
/// The CPL term is closed on the zeroth harmonic only.
pub fn averaged_dynamics(
    x: &AveragedPhysState,
    u: [f64; 2],
    p: &ConverterParams,
) -> Result<(Complex64, f64)> {
    if x.v0 < p.v_min {
        return Err(Error::DegenerateState { v: x.v0, v_min: p.v_min });
    }
    let j = Complex64::i();
    // ⟨µ⟩₁ = u2/2 - j·u1/2, mapped through the bridge polarity.
    let w = Complex64::new(bridge_switching(u[1]) / 2.0, -bridge_switching(u[0]) / 2.0);
    let di1 = -(w * x.v0
        + p.resistance * x.i1
        + j * p.omega * p.inductance * x.i1
        + j * p.source_amplitude / 2.0)
        / p.inductance;
    let dc_in = (w * x.i1.conj() + w.conj() * x.i1).re;
    let dv0 = (dc_in - p.conductance * x.v0 - cpl_current(x.v0, p.cpl_power, p.v_min)) / p.capacitance;
    Ok((di1, dv0))
}

/// RK4 integration of [`averaged_dynamics`] with each input held for one
/// AC period. Returns `x0` followed by one lifted state per period
/// (with `z4 = 1/⟨v⟩₀`).
pub fn simulate_averaged_oracle(
    x0: AveragedPhysState,
    inputs: &[[f64; 2]],
    p: &ConverterParams,
    steps_per_period: usize,
) -> Result<Vec<LiftedState>> {
    if steps_per_period == 0 {
        return Err(Error::config("oracle needs at least one step per period"));
    }
    let h = p.period() / steps_per_period as f64;
    let mut x = x0;
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(x.to_lifted());
    for &u in inputs {
        for _ in 0..steps_per_period {
            x = oracle_rk4(&x, u, p, h)?;
        }
        out.push(x.to_lifted());
    }
    Ok(out)
}

fn oracle_rk4(x: &AveragedPhysState, u: [f64; 2], p: &ConverterParams, h: f64) -> Result<AveragedPhysState> {
    let shifted = |di: Complex64, dv: f64, a: f64| AveragedPhysState { i1: x.i1 + di * a, v0: x.v0 + dv * a };
    let k1 = averaged_dynamics(x, u, p)?;
    let k2 = averaged_dynamics(&shifted(k1.0, k1.1, 0.5 * h), u, p)?;
    let k3 = averaged_dynamics(&shifted(k2.0, k2.1, 0.5 * h), u, p)?;
    let k4 = averaged_dynamics(&shifted(k3.0, k3.1, h), u, p)?;
    Ok(AveragedPhysState {
        i1: x.i1 + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (h / 6.0),
        v0: x.v0 + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * (h / 6.0),
    })
}

/// One row of the lifted-trajectory CSV (`k,z1,z2,z3,z4,u1,u2`). `u` is
/// the input applied from onset `k` to `k + 1`; absent on the last row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LiftedRow {
    pub k: i64,
    pub z: LiftedState,
    pub u: Option<[f64; 2]>,
}

pub fn write_lifted_csv<W: Write>(mut out: W, rows: &[LiftedRow]) -> Result<()> {
    writeln!(out, "k,z1,z2,z3,z4,u1,u2")?;
    for r in rows {
        let [z1, z2, z3, z4] = r.z.0;
        match r.u {
            Some([u1, u2]) => writeln!(out, "{},{z1},{z2},{z3},{z4},{u1},{u2}", r.k)?,
            None => writeln!(out, "{},{z1},{z2},{z3},{z4},,", r.k)?,
        }
    }
    Ok(())
}

pub fn read_lifted_csv(text: &str) -> Result<Vec<LiftedRow>> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("k,z1,z2,z3,z4,u1,u2") => {}
        other => return Err(Error::parse(format!("unexpected lifted-trajectory header {other:?}"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::parse(format!("line {}: expected 7 fields", n + 2)));
        }
        let k = fields[0]
            .trim()
            .parse::<i64>()
            .map_err(|e| Error::parse(format!("line {}: {e}", n + 2)))?;
        let z = parse_floats(&fields[1..5].join(","), n + 2)?;
        let u = if fields[5].trim().is_empty() && fields[6].trim().is_empty() {
            None
        } else {
            let u = parse_floats(&fields[5..7].join(","), n + 2)?;
            Some([u[0], u[1]])
        };
        rows.push(LiftedRow { k, z: LiftedState([z[0], z[1], z[2], z[3]]), u });
    }
    Ok(rows)
}
