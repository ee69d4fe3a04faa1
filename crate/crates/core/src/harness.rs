//! Scenario orchestration: training data, model validation, the closed-loop
//! load-step experiment and its metrics, plus CSV/SVG emission.

use std::collections::VecDeque;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ida_pbc, ideal_phase, PiPrController, PiPrGains};
use crate::edmd::{generate_training_inputs, predict, KoopmanModel, OnsetCurrent, ValidationMetrics};
use crate::error::{Error, Result};
use crate::gssa::{lift, reconstruct_current, samples_per_period, LiftedRow, LiftedState};
use crate::kmpc::{build_bounds, write_diagnostics_csv, Bounds2, KmpcController, MpcConfig, StepDiagnostics};
use crate::params::{nominal_inputs, ConverterParams};
use crate::plant::{integer_ratio, parse_floats, LoadProfile, Modulation, PlantMode, Sample, Simulator, SAMPLE_PERIOD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Kmpc,
    IdaPbc,
    PiPr,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Kmpc, ControllerKind::IdaPbc, ControllerKind::PiPr];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Kmpc => "kmpc",
            ControllerKind::IdaPbc => "ida_pbc",
            ControllerKind::PiPr => "pi_pr",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown controller '{s}' (expected kmpc, ida_pbc or pi_pr)")))
    }
}

/// Everything a run needs besides the model. Loaded from a flat TOML file;
/// unset keys take the defaults below, and `[plant]` overrides circuit values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub seed: u64,
    /// Plant mode of closed-loop runs.
    pub mode: PlantMode,
    /// Plant mode of training and validation runs.
    pub train_mode: PlantMode,
    pub controller: ControllerKind,

    pub train_periods: usize,
    /// Nominal-input periods simulated before the perturbed sequence.
    pub lead_in_periods: usize,
    /// Half-width of the uniform input perturbation.
    pub amplitude: f64,
    pub ridge: f64,
    pub validation_periods: usize,
    pub validation_horizon: usize,

    /// Length of the recorded run from t = 0 (s).
    pub duration: f64,
    /// Periods simulated before t = 0 under the same controller.
    pub settle_periods: usize,
    pub p_high: f64,
    pub t_step_on: f64,
    pub t_step_off: f64,
    /// Relative error on r in the controller's view of the plant.
    pub r_mismatch: f64,

    pub pf_min: f64,
    pub horizon: usize,
    pub slack_weight: f64,
    pub pi_pr: PiPrGains,

    /// Standard deviations of additive sensor noise (A, V).
    pub noise_i: f64,
    pub noise_v: f64,
    pub svg: bool,

    pub sweep_controllers: Vec<ControllerKind>,
    pub sweep_mismatch: Vec<f64>,

    pub plant: ConverterParams,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 1,
            mode: PlantMode::Switched,
            train_mode: PlantMode::Averaged,
            controller: ControllerKind::Kmpc,
            train_periods: 400,
            lead_in_periods: 5,
            amplitude: 0.1,
            ridge: crate::edmd::DEFAULT_RIDGE,
            validation_periods: 40,
            validation_horizon: 3,
            duration: 0.2,
            settle_periods: 10,
            p_high: 100.0,
            t_step_on: 0.034,
            t_step_off: 0.054,
            r_mismatch: 0.0,
            pf_min: crate::kmpc::DEFAULT_PF_MIN,
            horizon: 3,
            slack_weight: crate::kmpc::DEFAULT_SLACK_WEIGHT,
            pi_pr: PiPrGains::default(),
            noise_i: 0.0,
            noise_v: 0.0,
            svg: false,
            sweep_controllers: ControllerKind::ALL.to_vec(),
            sweep_mismatch: vec![0.0, 0.5],
            plant: ConverterParams::default(),
        }
    }
}

impl HarnessConfig {
    /// Parses a config file. `i_amp` is always recomputed from the circuit values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: HarnessConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.plant.refresh_feasible_current()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.pi_pr.validate()?;
        let n = self.samples_per_period()?;
        let t = self.plant.period();
        if integer_ratio(self.duration, t).is_none() {
            return Err(Error::config(format!("duration {} is not a whole number of {t} s periods", self.duration)));
        }
        if !(0.0 < self.t_step_on && self.t_step_on < self.t_step_off && self.t_step_off < self.duration) {
            return Err(Error::config(format!(
                "load step needs 0 < t_on < t_off < duration, got {} / {} / {}",
                self.t_step_on, self.t_step_off, self.duration
            )));
        }
        // The pre-step steady window reaches two periods before the first edge.
        let window_start = self.t_step_on - 2.0 * t;
        if window_start < -(self.settle_periods as f64) * t - 1e-12 {
            return Err(Error::config("settle_periods too short for the pre-step steady window"));
        }
        if integer_ratio(self.t_step_on, SAMPLE_PERIOD).is_none() || n < 2 {
            return Err(Error::config("t_step_on must lie on the sampling grid"));
        }
        if self.train_periods == 0 || self.validation_horizon == 0 || self.horizon == 0 {
            return Err(Error::config("period counts and horizons must be positive"));
        }
        if self.validation_periods < self.validation_horizon {
            return Err(Error::config("validation_periods must cover the prediction horizon"));
        }
        for (name, x) in [
            ("amplitude", self.amplitude),
            ("ridge", self.ridge),
            ("noise_i", self.noise_i),
            ("noise_v", self.noise_v),
            ("p_high", self.p_high),
            ("slack_weight", self.slack_weight),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {x}")));
            }
        }
        if !(self.pf_min > 0.0 && self.pf_min <= 1.0) {
            return Err(Error::config(format!("pf_min must lie in (0, 1], got {}", self.pf_min)));
        }
        if !(self.r_mismatch > -1.0) {
            return Err(Error::config("r_mismatch must exceed -1"));
        }
        Ok(())
    }

    pub fn samples_per_period(&self) -> Result<usize> {
        samples_per_period(self.plant.omega, SAMPLE_PERIOD)
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            controller: self.controller,
            mode: self.mode,
            duration: self.duration,
            p_base: self.plant.cpl_power,
            p_high: self.p_high,
            t_on: self.t_step_on,
            t_off: self.t_step_off,
            settle_periods: self.settle_periods,
            r_mismatch: self.r_mismatch,
        }
    }

    /// Parameters as the controllers believe them to be.
    pub fn controller_params(&self) -> Result<ConverterParams> {
        let mut p = self.plant;
        p.resistance *= 1.0 + self.r_mismatch;
        p.refresh_feasible_current()?;
        Ok(p)
    }

    fn sensor(&self, stream: u64) -> Result<Sensor> {
        let noise = |sigma: f64| {
            Normal::new(0.0, sigma).map_err(|e| Error::config(format!("sensor noise: {e}")))
        };
        Ok(if self.noise_i > 0.0 || self.noise_v > 0.0 {
            Sensor::Noisy {
                rng: Box::new(ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))),
                i: noise(self.noise_i)?,
                v: noise(self.noise_v)?,
            }
        } else {
            Sensor::Ideal
        })
    }
}

/// One closed-loop experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scenario {
    pub controller: ControllerKind,
    pub mode: PlantMode,
    pub duration: f64,
    pub p_base: f64,
    pub p_high: f64,
    pub t_on: f64,
    pub t_off: f64,
    pub settle_periods: usize,
    pub r_mismatch: f64,
}

impl Scenario {
    pub fn load(&self) -> LoadProfile {
        LoadProfile { base: self.p_base, high: self.p_high, t_start: self.t_on, t_end: self.t_off }
    }
}

enum Sensor {
    Ideal,
    Noisy { rng: Box<ChaCha8Rng>, i: Normal<f64>, v: Normal<f64> },
}

impl Sensor {
    fn measure(&mut self, s: Sample) -> Sample {
        match self {
            Sensor::Ideal => s,
            Sensor::Noisy { rng, i, v } => Sample { i: s.i + i.sample(rng), v: s.v + v.sample(rng), ..s },
        }
    }
}

// ---------------------------------------------------------------------------
// Training and validation

pub struct TrainingRun {
    /// Samples of the perturbed periods only.
    pub samples: Vec<Sample>,
    pub inputs: Vec<[f64; 2]>,
    /// Lift of the last lead-in period followed by one row per perturbed
    /// period; row k carries the input applied after it.
    pub lifted: Vec<LiftedRow>,
}

/// Simulates `periods` perturbed periods after a nominal lead-in.
pub fn run_open_loop(cfg: &HarnessConfig, seed: u64, periods: usize) -> Result<TrainingRun> {
    let p = cfg.plant;
    let n = cfg.samples_per_period()?;
    let nominal = nominal_inputs(&p);
    let inputs = generate_training_inputs(nominal, cfg.amplitude, periods, seed);
    let lead = cfg.lead_in_periods.max(1) as i64;
    let mut sim = Simulator::at_steady_state(p, cfg.train_mode, -lead * n as i64)?;
    let mut sensor = cfg.sensor(seed)?;

    let mut last_lead = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(periods * n);
    for q in -lead..periods as i64 {
        let u = if q < 0 { nominal } else { inputs[q as usize] };
        for _ in 0..n {
            let s = sensor.measure(sim.sample());
            if q == -1 {
                last_lead.push(s);
            } else if q >= 0 {
                samples.push(s);
            }
            sim.advance_sample(&Modulation::Spwm(u), None)?;
        }
    }

    let mut lifted = Vec::with_capacity(periods + 1);
    let windows = std::iter::once(last_lead.as_slice()).chain(samples.chunks(n));
    for (k, w) in windows.enumerate() {
        lifted.push(LiftedRow {
            k: k as i64,
            z: lift(w, p.omega, SAMPLE_PERIOD, p.v_min)?,
            u: inputs.get(k).copied(),
        });
    }
    Ok(TrainingRun { samples, inputs, lifted })
}

pub fn run_training(cfg: &HarnessConfig) -> Result<TrainingRun> {
    run_open_loop(cfg, cfg.seed, cfg.train_periods)
}

pub const RAW_HEADER: &str = "j,t,i,v";

pub fn write_samples_csv<W: Write>(mut out: W, samples: &[Sample]) -> Result<()> {
    writeln!(out, "{RAW_HEADER}")?;
    for s in samples {
        writeln!(out, "{},{},{},{}", s.index, s.t, s.i, s.v)?;
    }
    Ok(())
}

pub fn read_samples_csv(text: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RAW_HEADER) {
        return Err(Error::parse(format!("expected header '{RAW_HEADER}'")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_floats(line, n + 2)?;
        if f.len() != 4 {
            return Err(Error::parse(format!("line {}: expected 4 fields", n + 2)));
        }
        out.push(Sample { index: f[0] as i64, t: f[1], i: f[2], v: f[3] });
    }
    Ok(out)
}

/// One compared onset of the held-out run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRow {
    /// Index of the predicted lifted row.
    pub k: usize,
    /// Onset time of the predicted window.
    pub t: f64,
    pub z_pred: LiftedState,
    pub z_meas: LiftedState,
    pub i_meas: f64,
}

pub struct ValidationRun {
    pub rows: Vec<ValidationRow>,
    pub metrics: ValidationMetrics,
}

/// `horizon`-step-ahead predictions along a held-out open-loop run. The
/// reconstructed current is compared with the sample at the onset of the
/// predicted window.
pub fn run_validation(cfg: &HarnessConfig, model: &KoopmanModel, seed: u64) -> Result<ValidationRun> {
    let run = run_open_loop(cfg, seed, cfg.validation_periods)?;
    let n = cfg.samples_per_period()?;
    let h = cfg.validation_horizon;
    let mut rows = Vec::new();
    for k in 0..=run.inputs.len() - h {
        let traj = predict(model, run.lifted[k].z, &run.inputs[k..], h)?;
        let target = k + h;
        // Row m lifts perturbed period m − 1, whose first sample is (m − 1)·N.
        let onset = &run.samples[(target - 1) * n];
        rows.push(ValidationRow {
            k: target,
            t: onset.t,
            z_pred: traj[h],
            z_meas: run.lifted[target].z,
            i_meas: onset.i,
        });
    }
    let predicted: Vec<_> = rows.iter().map(|r| r.z_pred).collect();
    let measured: Vec<_> = rows.iter().map(|r| r.z_meas).collect();
    let onsets: Vec<_> = rows.iter().map(|r| OnsetCurrent { t: r.t, i: r.i_meas }).collect();
    let metrics = crate::edmd::validation_report(&predicted, &measured, &onsets, cfg.plant.omega)?;
    Ok(ValidationRun { rows, metrics })
}

pub fn write_validation_csv<W: Write>(mut out: W, rows: &[ValidationRow], omega: f64) -> Result<()> {
    writeln!(out, "k,t,z3_pred,z3_meas,i_hat,i_meas,err_v,err_i")?;
    for r in rows {
        let i_hat = reconstruct_current(r.z_pred.current_phasor(), r.t, omega);
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.k,
            r.t,
            r.z_pred.v_mean(),
            r.z_meas.v_mean(),
            i_hat,
            r.i_meas,
            (r.z_pred.v_mean() - r.z_meas.v_mean()).abs(),
            (i_hat - r.i_meas).abs()
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Closed loop

/// One sensor instant of a closed-loop run (true plant values).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveRow {
    pub index: i64,
    pub t: f64,
    pub i: f64,
    pub v: f64,
    pub v_ac: f64,
    pub mu: f64,
}

/// Lift of one period and the SPWM input held during it, if any.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodRow {
    pub k: i64,
    pub t: f64,
    pub z: LiftedState,
    pub u: Option<[f64; 2]>,
    pub violation: bool,
}

pub struct ClosedLoopRun {
    pub scenario: Scenario,
    pub waveform: Vec<WaveRow>,
    pub periods: Vec<PeriodRow>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub metrics: RunMetrics,
}

enum Active {
    Kmpc(Box<KmpcController>, [f64; 2]),
    IdaPbc { p: ConverterParams, loads: VecDeque<f64>, sum: f64 },
    PiPr(PiPrController),
}

/// Runs `cfg.controller` against the plant with the configured load step.
/// The run starts `settle_periods` before t = 0 from the nominal steady state.
pub fn run_closed_loop(cfg: &HarnessConfig, model: Option<&KoopmanModel>) -> Result<ClosedLoopRun> {
    cfg.validate()?;
    let sc = cfg.scenario();
    let p = cfg.plant;
    let pc = cfg.controller_params()?;
    let n = cfg.samples_per_period()?;
    let period = p.period();
    let k_end = integer_ratio(sc.duration, period).unwrap_or(0) as i64;
    let k0 = -(sc.settle_periods as i64);

    let mut active = match sc.controller {
        ControllerKind::Kmpc => {
            let model = model.ok_or_else(|| Error::config("the kmpc controller needs a model file"))?;
            let mut mc = MpcConfig::new(&pc, cfg.pf_min)?;
            mc.horizon = cfg.horizon;
            mc.slack_weight = Some(cfg.slack_weight);
            let u0 = nominal_inputs(&pc);
            Active::Kmpc(Box::new(KmpcController::new(*model, mc, u0)?), u0)
        }
        ControllerKind::IdaPbc => {
            let i0 = pc.load_current(pc.v_ref);
            Active::IdaPbc { p: pc, loads: std::iter::repeat_n(i0, n).collect(), sum: i0 * n as f64 }
        }
        ControllerKind::PiPr => Active::PiPr(PiPrController::new(cfg.pi_pr, SAMPLE_PERIOD, pc.v_ref, pc.i_amp)?),
    };

    let load = sc.load();
    let mut sim = Simulator::at_steady_state(p, sc.mode, k0 * n as i64)?.with_load(load);
    let mut sensor = cfg.sensor(0x5eed)?;
    let mut waveform = Vec::with_capacity(((k_end - k0) as usize) * n);
    let mut periods = Vec::new();
    let mut diagnostics = Vec::new();
    let mut measured: Vec<Sample> = Vec::with_capacity(n);
    let mut truth: Vec<Sample> = Vec::with_capacity(n);

    for k in k0..k_end {
        // Period onset: controllers that act once per period update here.
        let held = match &mut active {
            Active::Kmpc(ctrl, u) => {
                if measured.len() == n {
                    let z = lift(&measured, p.omega, SAMPLE_PERIOD, p.v_min)?;
                    let (next, diag) = ctrl.step(&z)?;
                    *u = next;
                    diagnostics.push(diag);
                }
                Some(*u)
            }
            Active::PiPr(ctrl) => {
                if measured.len() == n {
                    let v_mean = measured.iter().map(|s| s.v).sum::<f64>() / n as f64;
                    ctrl.update_voltage(v_mean, period);
                }
                None
            }
            Active::IdaPbc { .. } => None,
        };
        measured.clear();
        truth.clear();

        for _ in 0..n {
            let s_true = sim.sample();
            let s = sensor.measure(s_true);
            let modulation = match &mut active {
                Active::Kmpc(_, u) => Modulation::Spwm(*u),
                Active::IdaPbc { p: pc, loads, sum } => {
                    let i_l = p.conductance * s.v + crate::params::cpl_current(s.v, load.power(s.t), p.v_min);
                    *sum += i_l - loads.pop_front().unwrap_or(0.0);
                    loads.push_back(i_l);
                    Modulation::Spwm(ida_pbc(*sum / n as f64, pc)?)
                }
                Active::PiPr(ctrl) => Modulation::Hold(ctrl.step(s.i, ideal_phase(s.t, p.omega))),
            };
            waveform.push(WaveRow {
                index: s_true.index,
                t: s_true.t,
                i: s_true.i,
                v: s_true.v,
                v_ac: p.source_amplitude * (p.omega * s_true.t).sin(),
                mu: modulation.duty(s_true.t, p.omega),
            });
            measured.push(s);
            truth.push(s_true);
            sim.advance_sample(&modulation, None)?;
        }
        if k >= 0 {
            let z = lift(&truth, p.omega, SAMPLE_PERIOD, p.v_min)?;
            periods.push(PeriodRow { k, t: k as f64 * period, z, u: held, violation: false });
        }
    }

    let metrics = compute_metrics(&waveform, &p, &sc, cfg.pf_min)?;
    let (zb, _) = build_bounds(&pc, cfg.pf_min)?;
    for row in &mut periods {
        row.violation = violates(&row.z, &zb);
    }
    Ok(ClosedLoopRun { scenario: sc, waveform, periods, diagnostics, metrics })
}

fn violates(z: &LiftedState, zb: &Bounds2) -> bool {
    let [z1, z2, ..] = z.0;
    z1 < zb[0][0] || z1 > zb[0][1] || z2 < zb[1][0] || z2 > zb[1][1]
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub controller: String,
    /// |mean v − V_d| over the two periods before the first edge.
    pub ss_voltage_error: f64,
    /// Same over the last two periods of the run.
    pub ss_voltage_error_end: f64,
    pub power_factor: f64,
    pub power_factor_end: f64,
    /// max |i| over t ≥ 0.
    pub peak_current: f64,
    /// max |i| from the step-down edge on.
    pub peak_current_post_step: f64,
    /// max |i| over t ≥ 0 outside the violating periods that follow the step-down edge.
    pub peak_current_outside_violations: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restore_time_on: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restore_time_off: Option<f64>,
    /// Periods with t ≥ 0 whose lifted current leaves the bounds.
    pub constraint_violation_steps: usize,
    /// Violating periods among those ending after the step-down edge.
    pub violations_after_step_down: usize,
}

/// `mean(v_ac·i) / (rms(v_ac)·rms(i))`.
pub fn compute_power_factor(i: &[f64], v_ac: &[f64]) -> Result<f64> {
    if i.len() != v_ac.len() {
        return Err(Error::Dimension(format!("{} current vs {} voltage samples", i.len(), v_ac.len())));
    }
    if i.is_empty() {
        return Err(Error::config("empty power-factor window"));
    }
    let n = i.len() as f64;
    let rms = |x: &[f64]| (x.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let (ri, rv) = (rms(i), rms(v_ac));
    if ri == 0.0 {
        return Err(Error::UndefinedPowerFactor("current"));
    }
    if rv == 0.0 {
        return Err(Error::UndefinedPowerFactor("voltage"));
    }
    let p = i.iter().zip(v_ac).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok((p / (ri * rv)).clamp(0.0, 1.0))
}

/// Time from `t_edge` until the trailing one-period mean of v is within
/// `band` of `v_ref` and stays there for `hold` samples. `None` if that never
/// happens inside the record.
pub fn restore_time(w: &[WaveRow], n: usize, t_edge: f64, v_ref: f64, band: f64, hold: usize) -> Option<f64> {
    let mut prefix = Vec::with_capacity(w.len() + 1);
    prefix.push(0.0);
    for r in w {
        prefix.push(prefix.last().unwrap() + r.v);
    }
    let inside = |j: usize| j + 1 >= n && ((prefix[j + 1] - prefix[j + 1 - n]) / n as f64 - v_ref).abs() <= band;
    let start = w.iter().position(|r| r.t >= t_edge - 1e-12)?;
    let mut run = 0;
    for j in start..w.len() {
        if inside(j) {
            run += 1;
            if run > hold {
                return Some(w[j - hold].t - t_edge);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Metrics of a closed-loop waveform. The record must hold whole periods
/// aligned with the sampling index and reach two periods before `t_on`.
pub fn compute_metrics(w: &[WaveRow], p: &ConverterParams, sc: &Scenario, pf_min: f64) -> Result<RunMetrics> {
    let n = samples_per_period(p.omega, SAMPLE_PERIOD)?;
    let period = p.period();
    let first = w.first().ok_or_else(|| Error::config("empty waveform"))?;
    if first.index.rem_euclid(n as i64) != 0 || w.len() % n != 0 {
        return Err(Error::config("waveform is not a whole number of aligned periods"));
    }
    let pos = |t: f64| w.iter().position(|r| r.t >= t - 1e-9);
    let on = pos(sc.t_on).ok_or_else(|| Error::config("waveform ends before the load step"))?;
    if on < 2 * n {
        return Err(Error::config("waveform starts less than two periods before the load step"));
    }
    let steady = &w[on - 2 * n..on];
    let end = &w[w.len() - 2 * n..];
    let mean_v = |s: &[WaveRow]| s.iter().map(|r| r.v).sum::<f64>() / s.len() as f64;
    let pf = |s: &[WaveRow]| {
        let i: Vec<f64> = s.iter().map(|r| r.i).collect();
        let v: Vec<f64> = s.iter().map(|r| r.v_ac).collect();
        compute_power_factor(&i, &v)
    };

    let (zb, _) = build_bounds(p, pf_min)?;
    let zero = pos(0.0).unwrap_or(w.len());
    let mut violations = 0;
    let mut after_down = 0;
    let mut excluded = vec![false; w.len()];
    for (c, chunk) in w[zero..].chunks(n).enumerate() {
        if chunk.len() < n {
            break;
        }
        let samples: Vec<Sample> = chunk.iter().map(|r| Sample { index: r.index, t: r.t, i: r.i, v: r.v }).collect();
        let z = lift(&samples, p.omega, SAMPLE_PERIOD, p.v_min)?;
        if violates(&z, &zb) {
            violations += 1;
            if chunk[0].t + period > sc.t_off + 1e-9 {
                after_down += 1;
                let s = zero + c * n;
                excluded[s..s + n].fill(true);
            }
        }
    }
    let peak = |pred: &dyn Fn(usize, &WaveRow) -> bool| {
        w.iter().enumerate().filter(|(j, r)| pred(*j, r)).map(|(_, r)| r.i.abs()).fold(0.0, f64::max)
    };

    Ok(RunMetrics {
        controller: sc.controller.to_string(),
        ss_voltage_error: (mean_v(steady) - p.v_ref).abs(),
        ss_voltage_error_end: (mean_v(end) - p.v_ref).abs(),
        power_factor: pf(steady)?,
        power_factor_end: pf(end)?,
        peak_current: peak(&|_, r| r.t >= -1e-12),
        peak_current_post_step: peak(&|_, r| r.t >= sc.t_off - 1e-12),
        peak_current_outside_violations: peak(&|j, r| r.t >= -1e-12 && !excluded[j]),
        restore_time_on: restore_time(w, n, sc.t_on, p.v_ref, 1.0, 2 * n),
        restore_time_off: restore_time(w, n, sc.t_off, p.v_ref, 1.0, 2 * n),
        constraint_violation_steps: violations,
        violations_after_step_down: after_down,
    })
}

// ---------------------------------------------------------------------------
// Files

pub const WAVEFORM_HEADER: &str = "j,t,i,v,v_ac,mu";

pub fn write_waveform_csv<W: Write>(mut out: W, rows: &[WaveRow]) -> Result<()> {
    writeln!(out, "{WAVEFORM_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.index, r.t, r.i, r.v, r.v_ac, r.mu)?;
    }
    Ok(())
}

pub fn read_waveform_csv(text: &str) -> Result<Vec<WaveRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(WAVEFORM_HEADER) {
        return Err(Error::parse(format!("expected header '{WAVEFORM_HEADER}'")));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_floats(line, n + 2)?;
        if f.len() != 6 {
            return Err(Error::parse(format!("line {}: expected 6 fields", n + 2)));
        }
        out.push(WaveRow { index: f[0] as i64, t: f[1], i: f[2], v: f[3], v_ac: f[4], mu: f[5] });
    }
    Ok(out)
}

pub fn write_periods_csv<W: Write>(mut out: W, rows: &[PeriodRow]) -> Result<()> {
    writeln!(out, "k,t,z1,z2,z3,z4,u1,u2,violation")?;
    for r in rows {
        let [z1, z2, z3, z4] = r.z.0;
        let (u1, u2) = r.u.map_or((String::new(), String::new()), |u| (u[0].to_string(), u[1].to_string()));
        writeln!(out, "{},{},{z1},{z2},{z3},{z4},{u1},{u2},{}", r.k, r.t, u8::from(r.violation))?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn write_metrics(path: &Path, m: &RunMetrics) -> Result<()> {
    let text = toml::to_string(m).map_err(|e| Error::config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics> {
    toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::parse(e.to_string()))
}

pub fn write_training(dir: &Path, run: &TrainingRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut raw = create(&dir.join("raw.csv"))?;
    write_samples_csv(&mut raw, &run.samples)?;
    raw.flush()?;
    let mut lifted = create(&dir.join("lifted.csv"))?;
    crate::gssa::write_lifted_csv(&mut lifted, &run.lifted)?;
    lifted.flush()?;
    Ok(())
}

/// Writes waveform.csv, lifted.csv, diagnostics.csv (K-MPC only), metrics.toml
/// and, when requested, SVG figures.
pub fn write_closed_loop(dir: &Path, run: &ClosedLoopRun, svg: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("waveform.csv"))?;
    write_waveform_csv(&mut w, &run.waveform)?;
    w.flush()?;
    let mut l = create(&dir.join("lifted.csv"))?;
    write_periods_csv(&mut l, &run.periods)?;
    l.flush()?;
    if run.scenario.controller == ControllerKind::Kmpc {
        let mut d = create(&dir.join("diagnostics.csv"))?;
        write_diagnostics_csv(&mut d, &run.diagnostics)?;
        d.flush()?;
    }
    write_metrics(&dir.join("metrics.toml"), &run.metrics)?;
    if svg {
        fs::write(dir.join("waveform.svg"), waveform_svg(run))?;
        fs::write(dir.join("lifted.svg"), lifted_svg(run))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub controller: ControllerKind,
    pub r_mismatch: f64,
    pub metrics: RunMetrics,
}

/// Runs every (controller, mismatch) pair of the config in parallel. K-MPC
/// entries are skipped when no model is given.
pub fn run_sweep(cfg: &HarnessConfig, model: Option<&KoopmanModel>) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(ControllerKind, f64)> = cfg
        .sweep_controllers
        .iter()
        .filter(|c| **c != ControllerKind::Kmpc || model.is_some())
        .flat_map(|c| cfg.sweep_mismatch.iter().map(move |m| (*c, *m)))
        .collect();
    jobs.into_par_iter()
        .map(|(controller, r_mismatch)| {
            let c = HarnessConfig { controller, r_mismatch, ..cfg.clone() };
            let run = run_closed_loop(&c, model)?;
            Ok(SweepRow { controller, r_mismatch, metrics: run.metrics })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(
        out,
        "controller,r_mismatch,ss_voltage_error,power_factor,peak_current,peak_current_post_step,restore_time_on,restore_time_off,constraint_violation_steps"
    )?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.controller,
            r.r_mismatch,
            m.ss_voltage_error,
            m.power_factor,
            m.peak_current,
            m.peak_current_post_step,
            opt(m.restore_time_on),
            opt(m.restore_time_off),
            m.constraint_violation_steps
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG

struct Panel<'a> {
    label: &'a str,
    series: Vec<(&'a str, Vec<(f64, f64)>)>,
    marks: &'a [f64],
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_panels(title: &str, panels: &[Panel]) -> String {
    let (w, ph, top, left) = (900.0, 180.0, 30.0, 70.0);
    let h = top + panels.len() as f64 * (ph + 30.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{left}" y="18" font-size="13">{title}</text>"#);
    for (pi, panel) in panels.iter().enumerate() {
        let y0 = top + pi as f64 * (ph + 30.0);
        let pts = panel.series.iter().flat_map(|(_, v)| v.iter());
        let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
        if x_lo >= x_hi {
            continue;
        }
        if y_hi - y_lo < 1e-9 {
            y_lo -= 1.0;
            y_hi += 1.0;
        }
        let pw = w - left - 20.0;
        let sx = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * pw;
        let sy = |y: f64| y0 + ph - (y - y_lo) / (y_hi - y_lo) * ph;
        let _ = writeln!(s, r##"<rect x="{left}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>"##);
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, y0 + ph / 2.0, panel.label);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{y_hi:.3}</text>"#, left - 60.0, y0 + 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{y_lo:.3}</text>"#, left - 60.0, y0 + ph);
        for &m in panel.marks {
            if m > x_lo && m < x_hi {
                let x = sx(m);
                let _ = writeln!(s, r##"<line x1="{x}" y1="{y0}" x2="{x}" y2="{}" stroke="#444" stroke-dasharray="3,3"/>"##, y0 + ph);
            }
        }
        for (si, (name, v)) in panel.series.iter().enumerate() {
            let c = COLORS[si % COLORS.len()];
            let mut d = String::new();
            for &(x, y) in v {
                let _ = write!(d, "{:.1},{:.1} ", sx(x), sy(y));
            }
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1" points="{d}"/>"#);
            let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, left + 8.0 + 90.0 * si as f64, y0 + ph + 14.0);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// v, i with v_ac, and µ against time in ms.
pub fn waveform_svg(run: &ClosedLoopRun) -> String {
    let ms = |r: &WaveRow| r.t * 1e3;
    let w: Vec<&WaveRow> = run.waveform.iter().filter(|r| r.t >= 0.0).collect();
    let marks = [run.scenario.t_on * 1e3, run.scenario.t_off * 1e3];
    let scale = w.iter().map(|r| r.i.abs()).fold(0.0, f64::max)
        / w.iter().map(|r| r.v_ac.abs()).fold(1e-12, f64::max);
    svg_panels(
        &format!("{} closed loop", run.scenario.controller),
        &[
            Panel { label: "v (V)", series: vec![("v", w.iter().map(|r| (ms(r), r.v)).collect())], marks: &marks },
            Panel {
                label: "i (A)",
                series: vec![
                    ("i", w.iter().map(|r| (ms(r), r.i)).collect()),
                    ("v_ac (scaled)", w.iter().map(|r| (ms(r), r.v_ac * scale)).collect()),
                ],
                marks: &marks,
            },
            Panel { label: "mu", series: vec![("mu", w.iter().map(|r| (ms(r), r.mu)).collect())], marks: &marks },
        ],
    )
}

/// Per-period lifted components against time in ms.
pub fn lifted_svg(run: &ClosedLoopRun) -> String {
    let marks = [run.scenario.t_on * 1e3, run.scenario.t_off * 1e3];
    let comp = |c: usize| run.periods.iter().map(|r| (r.t * 1e3, r.z.0[c])).collect::<Vec<_>>();
    svg_panels(
        &format!("{} lifted state", run.scenario.controller),
        &[
            Panel { label: "z1, z2 (A)", series: vec![("z1", comp(0)), ("z2", comp(1))], marks: &marks },
            Panel { label: "z3 (V)", series: vec![("z3", comp(2))], marks: &marks },
            Panel { label: "z4 (1/V)", series: vec![("z4", comp(3))], marks: &marks },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn sinusoids(phase: f64) -> (Vec<f64>, Vec<f64>) {
        let n = 200;
        let th: Vec<f64> = (0..n).map(|j| 2.0 * PI * j as f64 / 100.0).collect();
        (th.iter().map(|t| 3.0 * (t - phase).sin()).collect(), th.iter().map(|t| 39.6 * t.sin()).collect())
    }

    #[test]
    fn power_factor_of_sinusoid_pairs() {
        let (i, v) = sinusoids(0.0);
        assert_abs_diff_eq!(compute_power_factor(&i, &v).unwrap(), 1.0, epsilon = 1e-9);
        let (i, v) = sinusoids(PI / 2.0);
        assert_abs_diff_eq!(compute_power_factor(&i, &v).unwrap(), 0.0, epsilon = 1e-9);
        let (i, v) = sinusoids(0.9f64.acos());
        assert_abs_diff_eq!(compute_power_factor(&i, &v).unwrap(), 0.9, epsilon = 1e-6);
        let zeros = vec![0.0; v.len()];
        assert!(matches!(compute_power_factor(&zeros, &v), Err(Error::UndefinedPowerFactor(_))));
    }

    #[test]
    fn ideal_trajectory_metrics() {
        let p = ConverterParams::default();
        let cfg = HarnessConfig::default();
        let sc = cfg.scenario();
        let w: Vec<WaveRow> = (-1000..1000)
            .map(|j| {
                let t = j as f64 * SAMPLE_PERIOD;
                let s = (p.omega * t).sin();
                WaveRow { index: j, t, i: p.i_amp * s, v: p.v_ref, v_ac: p.source_amplitude * s, mu: 0.0 }
            })
            .collect();
        let m = compute_metrics(&w, &p, &sc, cfg.pf_min).unwrap();
        assert_eq!(m.ss_voltage_error, 0.0);
        assert_eq!(m.restore_time_on, Some(0.0));
        assert_eq!(m.restore_time_off, Some(0.0));
        assert_eq!(m.constraint_violation_steps, 0);
        assert_abs_diff_eq!(m.power_factor, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn restore_time_finds_reentry() {
        let n = 100;
        // 60 → 47 V dip for three periods after the edge, then back.
        let w: Vec<WaveRow> = (0..1000)
            .map(|j| {
                let t = j as f64 * SAMPLE_PERIOD;
                let v = if (200..500).contains(&j) { 45.0 } else { 48.0 };
                WaveRow { index: j, t, i: 0.0, v, v_ac: 0.0, mu: 0.0 }
            })
            .collect();
        let t = restore_time(&w, n, 0.04, 48.0, 1.0, 2 * n).unwrap();
        // Trailing mean re-enters 48 ± 1 once at most 33 samples of 45 V remain.
        assert_abs_diff_eq!(t, (566 - 200) as f64 * SAMPLE_PERIOD, epsilon = 1e-9);
    }

    #[test]
    fn config_round_trip_and_rejects_unknown_keys() {
        let cfg = HarnessConfig::default();
        let back = HarnessConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(HarnessConfig::from_toml("bogus = 1").is_err());
        let c = HarnessConfig::from_toml("duration = 0.12\n[plant]\nresistance = 0.0\n").unwrap();
        assert_abs_diff_eq!(c.plant.i_amp, 2.426, epsilon = 1e-3);
        assert!(HarnessConfig::from_toml("t_step_on = 0.06\nt_step_off = 0.05").is_err());
    }

    #[test]
    fn controller_names_round_trip() {
        for c in ControllerKind::ALL {
            assert_eq!(c.name().parse::<ControllerKind>().unwrap(), c);
        }
        assert!("pid".parse::<ControllerKind>().is_err());
    }

    #[test]
    fn training_shapes() {
        let cfg = HarnessConfig { train_periods: 4, ..HarnessConfig::default() };
        let run = run_training(&cfg).unwrap();
        assert_eq!(run.samples.len(), 400);
        assert_eq!(run.lifted.len(), 5);
        assert!(run.lifted[4].u.is_none());
        assert_eq!(run.lifted[0].u, Some(run.inputs[0]));
        assert_eq!(run.samples[0].index, 0);
    }
}
