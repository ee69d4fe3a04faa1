//! Ground-truth simulation of the rectifier in switched (PWM) and
//! duty-averaged form, integrated with fixed-step RK4 and sampled on a
//! uniform grid aligned with the AC period.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::params::{cpl_current, ConverterParams};

/// Default integrator step in switched mode: 100 steps per 50 µs carrier period.
pub const SWITCHED_STEP: f64 = 0.5e-6;
/// Default integrator step in averaged mode.
pub const AVERAGED_STEP: f64 = 20e-6;
/// Sensor sampling period Δt.
pub const SAMPLE_PERIOD: f64 = 200e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantState {
    /// AC current (A)
    pub i: f64,
    /// DC voltage (V)
    pub v: f64,
    /// Simulation time (s)
    pub t: f64,
}

impl PlantState {
    /// Stored energy ½Li² + ½Cv².
    pub fn energy(&self, p: &ConverterParams) -> f64 {
        0.5 * p.inductance * self.i * self.i + 0.5 * p.capacitance * self.v * self.v
    }
}

/// One sensor reading on the uniform grid `t = index · Δt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub index: i64,
    pub t: f64,
    pub i: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlantMode {
    Switched,
    #[default]
    Averaged,
}

impl PlantMode {
    pub fn default_step(self) -> f64 {
        match self {
            PlantMode::Switched => SWITCHED_STEP,
            PlantMode::Averaged => AVERAGED_STEP,
        }
    }
}

impl fmt::Display for PlantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlantMode::Switched => "switched",
            PlantMode::Averaged => "averaged",
        })
    }
}

impl FromStr for PlantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "switched" => Ok(PlantMode::Switched),
            "averaged" => Ok(PlantMode::Averaged),
            other => Err(Error::config(format!("unknown plant mode '{other}'"))),
        }
    }
}

/// SPWM duty ratio µ = u1·sin θ + u2·cos θ. Not saturated.
pub fn spwm_duty(u: [f64; 2], theta: f64) -> f64 {
    u[0] * theta.sin() + u[1] * theta.cos()
}

/// Symmetric triangle carrier in [-1, 1]; -1 at every multiple of the
/// carrier period, +1 half a period later.
pub fn carrier(t: f64, f_sw: f64) -> f64 {
    let phase = (t * f_sw).rem_euclid(1.0);
    if phase < 0.5 {
        -1.0 + 4.0 * phase
    } else {
        3.0 - 4.0 * phase
    }
}

/// Gate signal s ∈ {-1, +1} from comparing `mu` against the carrier.
pub fn pwm_signal(mu: f64, t: f64, f_sw: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&mu) {
        return Err(Error::DutyOutOfRange(mu));
    }
    // Saturated duties hold the gate even at the carrier extremes.
    Ok(if mu >= 1.0 || (mu > -1.0 && mu >= carrier(t, f_sw)) { 1.0 } else { -1.0 })
}

/// Bridge switching function seen by the circuit equations for a given
/// modulation value. The SPWM input convention (negative ū1 at the
/// nominal operating point) drives the bridge with reversed polarity.
#[inline]
pub fn bridge_switching(modulation: f64) -> f64 {
    -modulation
}

/// Right-hand side of the switched model
///
/// ```text
/// L di/dt = -s·v - r·i + E·sin(ωt)
/// C dv/dt =  s·i - G·v - P/v
/// ```
///
/// `s` is the bridge switching function (±1, or the averaged duty).
pub fn plant_derivatives(x: &PlantState, s: f64, p: &ConverterParams) -> Result<(f64, f64)> {
    if p.cpl_power > 0.0 && x.v < p.v_min {
        return Err(Error::DegenerateState { v: x.v, v_min: p.v_min });
    }
    let di = (-s * x.v - p.resistance * x.i + p.source_amplitude * (p.omega * x.t).sin())
        / p.inductance;
    let dv = (s * x.i - p.conductance * x.v - cpl_current(x.v, p.cpl_power, p.v_min))
        / p.capacitance;
    Ok((di, dv))
}

/// What the controller hands to the modulator until its next update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Modulation {
    /// u1·sin ωt + u2·cos ωt, evaluated continuously.
    Spwm([f64; 2]),
    /// Zero-order-held duty ratio.
    Hold(f64),
}

impl Modulation {
    /// Duty ratio at time `t`, clamped to [-1, 1].
    pub fn duty(&self, t: f64, omega: f64) -> f64 {
        let mu = match *self {
            Modulation::Spwm(u) => spwm_duty(u, omega * t),
            Modulation::Hold(mu) => mu,
        };
        mu.clamp(-1.0, 1.0)
    }
}

/// Piecewise-constant CPL set-point: `high` on `[t_start, t_end)`, `base` elsewhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadProfile {
    pub base: f64,
    pub high: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl LoadProfile {
    pub fn constant(power: f64) -> Self {
        LoadProfile { base: power, high: power, t_start: 0.0, t_end: 0.0 }
    }

    pub fn power(&self, t: f64) -> f64 {
        if t >= self.t_start && t < self.t_end {
            self.high
        } else {
            self.base
        }
    }
}

/// One integrator step as written to the waveform trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub i: f64,
    pub v: f64,
    pub mu: f64,
    /// Gate signal; `None` in averaged mode.
    pub s: Option<f64>,
}

/// Fixed-step RK4 integration of the rectifier on an integer step grid.
///
/// Time is `t0 + n·h` with `t0 = first_sample · Δt`, so that sample indices
/// stay aligned with grid-phase zero crossings whenever `first_sample` is a
/// multiple of the samples per period.
#[derive(Clone, Debug)]
pub struct Simulator {
    params: ConverterParams,
    mode: PlantMode,
    load: LoadProfile,
    h: f64,
    dt_sample: f64,
    steps_per_sample: u64,
    first_sample: i64,
    n: u64,
    i: f64,
    v: f64,
}

impl Simulator {
    pub fn new(
        params: ConverterParams,
        mode: PlantMode,
        h: f64,
        dt_sample: f64,
        first_sample: i64,
        i0: f64,
        v0: f64,
    ) -> Result<Self> {
        params.validate()?;
        if !(h > 0.0) {
            return Err(Error::config(format!("integrator step must be positive, got {h}")));
        }
        let steps_per_sample = integer_ratio(dt_sample, h)
            .ok_or_else(|| Error::config(format!("sample period {dt_sample} is not a multiple of step {h}")))?;
        if mode == PlantMode::Switched {
            let per_carrier = integer_ratio(1.0 / params.f_sw, h);
            if per_carrier.is_none() {
                return Err(Error::config(format!(
                    "switched-mode step {h} does not divide the carrier period {}",
                    1.0 / params.f_sw
                )));
            }
        }
        Ok(Simulator {
            params,
            mode,
            load: LoadProfile::constant(params.cpl_power),
            h,
            dt_sample,
            steps_per_sample,
            first_sample,
            n: 0,
            i: i0,
            v: v0,
        })
    }

    /// Simulator started on the unity-power-factor steady state
    /// `(I_d sin ωt0, V_d)` at sample `first_sample`.
    pub fn at_steady_state(
        params: ConverterParams,
        mode: PlantMode,
        first_sample: i64,
    ) -> Result<Self> {
        let t0 = first_sample as f64 * SAMPLE_PERIOD;
        let i0 = params.i_amp * (params.omega * t0).sin();
        Simulator::new(params, mode, mode.default_step(), SAMPLE_PERIOD, first_sample, i0, params.v_ref)
    }

    pub fn with_load(mut self, load: LoadProfile) -> Self {
        self.load = load;
        self
    }

    pub fn params(&self) -> &ConverterParams {
        &self.params
    }

    pub fn mode(&self) -> PlantMode {
        self.mode
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn steps_per_sample(&self) -> u64 {
        self.steps_per_sample
    }

    pub fn time(&self) -> f64 {
        self.first_sample as f64 * self.dt_sample + self.n as f64 * self.h
    }

    pub fn state(&self) -> PlantState {
        PlantState { i: self.i, v: self.v, t: self.time() }
    }

    /// Index of the current sample if the clock sits on the sampling grid.
    pub fn sample_index(&self) -> Option<i64> {
        (self.n % self.steps_per_sample == 0)
            .then(|| self.first_sample + (self.n / self.steps_per_sample) as i64)
    }

    /// Current sensor reading. Only meaningful on the sampling grid.
    pub fn sample(&self) -> Sample {
        let index = self.first_sample + (self.n / self.steps_per_sample) as i64;
        Sample { index, t: self.time(), i: self.i, v: self.v }
    }

    /// Advances one RK4 step. In switched mode the gate signal is evaluated
    /// at the step midpoint and held for the whole step.
    pub fn step(&mut self, modulation: &Modulation) -> Result<TraceRow> {
        let t = self.time();
        let mut p = self.params;
        p.cpl_power = self.load.power(t);
        let omega = p.omega;
        let h = self.h;
        let x = PlantState { i: self.i, v: self.v, t };

        let (row, next) = match self.mode {
            PlantMode::Switched => {
                let tm = t + 0.5 * h;
                let mu = modulation.duty(tm, omega);
                let s = pwm_signal(mu, tm, p.f_sw)?;
                let next = rk4(&x, h, &p, |_| bridge_switching(s))?;
                (TraceRow { t, i: x.i, v: x.v, mu, s: Some(s) }, next)
            }
            PlantMode::Averaged => {
                let mu = modulation.duty(t, omega);
                let next = rk4(&x, h, &p, |tau| bridge_switching(modulation.duty(tau, omega)))?;
                (TraceRow { t, i: x.i, v: x.v, mu, s: None }, next)
            }
        };
        self.i = next.0;
        self.v = next.1;
        self.n += 1;
        Ok(row)
    }

    /// Runs until the next sampling instant and returns the reading there.
    /// Every integrator step is pushed to `trace` when one is supplied.
    pub fn advance_sample(
        &mut self,
        modulation: &Modulation,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<Sample> {
        loop {
            let row = self.step(modulation)?;
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(row);
            }
            if self.n % self.steps_per_sample == 0 {
                return Ok(self.sample());
            }
        }
    }
}

fn rk4(
    x: &PlantState,
    h: f64,
    p: &ConverterParams,
    switching: impl Fn(f64) -> f64,
) -> Result<(f64, f64)> {
    let eval = |t: f64, i: f64, v: f64| plant_derivatives(&PlantState { i, v, t }, switching(t), p);
    let (t, i, v) = (x.t, x.i, x.v);
    let k1 = eval(t, i, v)?;
    let k2 = eval(t + 0.5 * h, i + 0.5 * h * k1.0, v + 0.5 * h * k1.1)?;
    let k3 = eval(t + 0.5 * h, i + 0.5 * h * k2.0, v + 0.5 * h * k2.1)?;
    let k4 = eval(t + h, i + h * k3.0, v + h * k3.1)?;
    Ok((
        i + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        v + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    ))
}

/// `Some(n)` when `num / den` is a positive integer up to rounding.
pub(crate) fn integer_ratio(num: f64, den: f64) -> Option<u64> {
    if !(num > 0.0 && den > 0.0) {
        return None;
    }
    let ratio = num / den;
    let rounded = ratio.round();
    ((ratio - rounded).abs() < 1e-6 * rounded.max(1.0) && rounded >= 1.0).then_some(rounded as u64)
}

/// Decimates an integrator trajectory (spaced by `h_sim`, starting on the
/// sampling grid at `first_index`) down to sensor samples every `dt_sample`.
pub fn sample_outputs(
    trajectory: &[PlantState],
    h_sim: f64,
    dt_sample: f64,
    first_index: i64,
) -> Result<Vec<Sample>> {
    let ratio = integer_ratio(dt_sample, h_sim).ok_or_else(|| {
        Error::config(format!("sample period {dt_sample} is not a multiple of step {h_sim}"))
    })? as usize;
    Ok(trajectory
        .iter()
        .step_by(ratio)
        .enumerate()
        .map(|(k, x)| Sample { index: first_index + k as i64, t: x.t, i: x.i, v: x.v })
        .collect())
}

/// Writes the waveform trace as CSV with header `t,i,v,mu,s` (`t,i,v,mu`
/// when the trace carries no gate signal).
pub fn write_trace_csv<W: Write>(mut out: W, rows: &[TraceRow]) -> Result<()> {
    let switched = rows.first().is_some_and(|r| r.s.is_some());
    if switched {
        writeln!(out, "t,i,v,mu,s")?;
    } else {
        writeln!(out, "t,i,v,mu")?;
    }
    for r in rows {
        match r.s {
            Some(s) if switched => writeln!(out, "{},{},{},{},{}", r.t, r.i, r.v, r.mu, s)?,
            _ => writeln!(out, "{},{},{},{}", r.t, r.i, r.v, r.mu)?,
        }
    }
    Ok(())
}

/// Parses a CSV written by [`write_trace_csv`].
pub fn read_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse("empty trace file"))?;
    let switched = match header.trim() {
        "t,i,v,mu,s" => true,
        "t,i,v,mu" => false,
        other => return Err(Error::parse(format!("unexpected trace header '{other}'"))),
    };
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = parse_floats(line, n + 2)?;
        let want = if switched { 5 } else { 4 };
        if fields.len() != want {
            return Err(Error::parse(format!("line {}: expected {want} fields", n + 2)));
        }
        rows.push(TraceRow {
            t: fields[0],
            i: fields[1],
            v: fields[2],
            mu: fields[3],
            s: switched.then(|| fields[4]),
        });
    }
    Ok(rows)
}

pub(crate) fn parse_floats(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(format!("line {line_no}: '{f}': {e}")))
        })
        .collect()
}
