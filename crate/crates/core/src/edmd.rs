//! Least-squares identification of the lifted linear model
//! `z[k+1] = A z[k] + B u[k]` and multi-step prediction.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, Matrix4, Matrix4x2, Vector2, Vector4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gssa::{lift, reconstruct_current, samples_per_period, LiftedState};
use crate::plant::Sample;

/// Default Tikhonov weight on ‖[A B]‖².
pub const DEFAULT_RIDGE: f64 = 1e-8;

/// Relative change of [A B] above which the ridge is reported as material.
const RIDGE_MATERIAL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KoopmanModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
}

impl KoopmanModel {
    pub fn step(&self, z: &LiftedState, u: [f64; 2]) -> LiftedState {
        let next = self.a * Vector4::from(z.0) + self.b * Vector2::from(u);
        LiftedState([next[0], next[1], next[2], next[3]])
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.a.complex_eigenvalues().iter().copied().collect()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|x| x.is_finite())
    }

    /// Plain-text form: `A 4 4` then four rows, `B 4 2` then four rows.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "A 4 4").unwrap();
        for r in 0..4 {
            let row: Vec<String> = (0..4).map(|c| format!("{:e}", self.a[(r, c)])).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        writeln!(out, "B 4 2").unwrap();
        for r in 0..4 {
            let row: Vec<String> = (0..2).map(|c| format!("{:e}", self.b[(r, c)])).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let a = read_block(&mut lines, "A", 4, 4)?;
        let b = read_block(&mut lines, "B", 4, 2)?;
        Ok(KoopmanModel {
            a: Matrix4::from_row_slice(&a),
            b: Matrix4x2::from_row_slice(&b),
        })
    }
}

fn read_block<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let header = lines.next().ok_or_else(|| Error::parse(format!("missing '{name}' header")))?;
    let want = format!("{name} {rows} {cols}");
    if header.split_whitespace().collect::<Vec<_>>().join(" ") != want {
        return Err(Error::parse(format!("expected '{want}', found '{header}'")));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(format!("{name}: missing row {r}")))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|e| Error::parse(format!("{name} row {r}: '{x}': {e}"))))
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(Error::parse(format!("{name} row {r}: expected {cols} entries, found {}", row.len())));
        }
        values.extend(row);
    }
    Ok(values)
}

/// Per-period SPWM inputs `ū + Δu` with Δu uniform in `[-amplitude, amplitude]`.
pub fn generate_training_inputs(nominal: [f64; 2], amplitude: f64, periods: usize, seed: u64) -> Vec<[f64; 2]> {
    assert!(amplitude >= 0.0, "perturbation amplitude must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..periods)
        .map(|_| {
            if amplitude == 0.0 {
                nominal
            } else {
                [
                    nominal[0] + rng.random_range(-amplitude..=amplitude),
                    nominal[1] + rng.random_range(-amplitude..=amplitude),
                ]
            }
        })
        .collect()
}

/// Snapshot matrices for the regression: column `k` of `z_plus` is the
/// lift one period after column `k` of `z`, and `u[k]` is the input applied
/// in between.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDataset {
    pub z: Vec<LiftedState>,
    pub z_plus: Vec<LiftedState>,
    pub u: Vec<[f64; 2]>,
}

impl TrainingDataset {
    /// Dataset from `K + 1` consecutive lifts and the `K` inputs between them.
    pub fn from_lifts(lifts: &[LiftedState], inputs: &[[f64; 2]]) -> Result<Self> {
        if lifts.len() != inputs.len() + 1 {
            return Err(Error::config(format!(
                "{} lifted windows need {} inputs, got {}",
                lifts.len(),
                lifts.len().saturating_sub(1),
                inputs.len()
            )));
        }
        Ok(TrainingDataset {
            z: lifts[..inputs.len()].to_vec(),
            z_plus: lifts[1..].to_vec(),
            u: inputs.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Lifts every full period of `samples` and pairs consecutive windows with
/// the per-period inputs. `samples` must start on a period boundary and
/// span `inputs.len() + 1` periods.
pub fn build_dataset(
    samples: &[Sample],
    inputs: &[[f64; 2]],
    omega: f64,
    dt: f64,
    v_min: f64,
) -> Result<TrainingDataset> {
    let lifts = lift_periods(samples, omega, dt, v_min)?;
    TrainingDataset::from_lifts(&lifts, inputs)
}

/// Lifts consecutive one-period windows of `samples`.
pub fn lift_periods(samples: &[Sample], omega: f64, dt: f64, v_min: f64) -> Result<Vec<LiftedState>> {
    let n = samples_per_period(omega, dt)?;
    let first = samples.first().ok_or_else(|| Error::config("no samples to lift"))?;
    if first.index.rem_euclid(n as i64) != 0 {
        return Err(Error::config(format!(
            "samples start at index {} which is not a period boundary",
            first.index
        )));
    }
    if samples.len() % n != 0 {
        return Err(Error::config(format!(
            "{} samples is not a whole number of {n}-sample periods",
            samples.len()
        )));
    }
    samples.chunks(n).map(|w| lift(w, omega, dt, v_min)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
    /// ‖W_ridge − W_minnorm‖_F / ‖W_minnorm‖_F
    pub ridge_shift: f64,
    pub ridge_material: bool,
    /// ‖Z⁺ − A Z − B U‖_F
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub model: KoopmanModel,
    pub report: FitReport,
}

/// Regularized least squares for `[A B]` via SVD of the stacked regressor
/// `[Z; U]`. With `ridge = 0` this is the minimum-norm solution
/// `Z⁺ [Z; U]^†`.
pub fn fit_model(ds: &TrainingDataset, ridge: f64) -> Result<Fit> {
    if !(ridge >= 0.0) {
        return Err(Error::config(format!("ridge must be non-negative, got {ridge}")));
    }
    let k = ds.len();
    if k == 0 || ds.z.len() != k || ds.z_plus.len() != k {
        return Err(Error::Dimension(format!(
            "dataset columns: z {}, z_plus {}, u {}",
            ds.z.len(),
            ds.z_plus.len(),
            k
        )));
    }
    let x = DMatrix::from_fn(6, k, |r, c| if r < 4 { ds.z[c].0[r] } else { ds.u[c][r - 4] });
    let y = DMatrix::from_fn(4, k, |r, c| ds.z_plus[c].0[r]);

    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().copied().fold(0.0, f64::max);
    let tol = 6usize.max(k) as f64 * f64::EPSILON * sigma_max;
    let rank = sigma.iter().filter(|&&s| s > tol).count();

    let solve = |lambda: f64| -> DMatrix<f64> {
        let filter: Vec<f64> = sigma
            .iter()
            .map(|&s| {
                if lambda > 0.0 {
                    s / (s * s + lambda)
                } else if s > tol {
                    1.0 / s
                } else {
                    0.0
                }
            })
            .collect();
        let mut yv = &y * v_t.transpose();
        for (c, f) in filter.iter().enumerate() {
            yv.column_mut(c).scale_mut(*f);
        }
        yv * u.transpose()
    };

    let w_min = solve(0.0);
    let w = if ridge > 0.0 { solve(ridge) } else { w_min.clone() };
    let norm_min = w_min.norm();
    let ridge_shift = if norm_min > 0.0 { (&w - &w_min).norm() / norm_min } else { (&w - &w_min).norm() };
    let ridge_material = ridge_shift > RIDGE_MATERIAL;
    let rank_deficient = rank < 6;
    if rank_deficient && ridge == 0.0 {
        warn!("stacked regressor has rank {rank} < 6; returning the minimum-norm solution");
    }
    if ridge_material {
        warn!("ridge {ridge} moved [A B] by {ridge_shift:.3e} relative to the plain least-squares fit");
    }

    let model = KoopmanModel {
        a: Matrix4::from_fn(|r, c| w[(r, c)]),
        b: Matrix4x2::from_fn(|r, c| w[(r, c + 4)]),
    };
    let residual = (&y - &w * &x).norm();
    Ok(Fit {
        model,
        report: FitReport {
            singular_values: sigma.iter().copied().collect(),
            rank,
            rank_deficient,
            ridge_shift,
            ridge_material,
            residual,
        },
    })
}

/// Iterates the model from `z0` over the first `steps` inputs. Returns
/// `steps + 1` states starting with `z0`.
pub fn predict(m: &KoopmanModel, z0: LiftedState, inputs: &[[f64; 2]], steps: usize) -> Result<Vec<LiftedState>> {
    if steps > inputs.len() {
        return Err(Error::config(format!("{steps} prediction steps but only {} inputs", inputs.len())));
    }
    let mut out = Vec::with_capacity(steps + 1);
    let mut z = z0;
    out.push(z);
    for u in &inputs[..steps] {
        z = m.step(&z, *u);
        out.push(z);
    }
    Ok(out)
}

/// Measured instantaneous current at a control onset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnsetCurrent {
    pub t: f64,
    pub i: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationMetrics {
    /// Per-component RMSE of predicted vs measured lifted states.
    pub rmse: [f64; 4],
    /// |ẑ3 − ⟨v⟩₀| per compared step.
    pub voltage_errors: Vec<f64>,
    /// Reconstructed current î(t_k) per compared step.
    pub reconstructed: Vec<f64>,
    /// |î(t_k) − i(t_k)| per compared step.
    pub current_errors: Vec<f64>,
}

impl ValidationMetrics {
    pub fn max_voltage_error(&self) -> f64 {
        self.voltage_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_current_error(&self) -> f64 {
        self.current_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares predicted and measured lifted states and the current
/// reconstructed from each predicted phasor at the matching onset.
pub fn validation_report(
    predicted: &[LiftedState],
    measured: &[LiftedState],
    onsets: &[OnsetCurrent],
    omega: f64,
) -> Result<ValidationMetrics> {
    if predicted.len() != measured.len() || predicted.len() != onsets.len() {
        return Err(Error::Dimension(format!(
            "predicted {}, measured {}, onsets {}",
            predicted.len(),
            measured.len(),
            onsets.len()
        )));
    }
    let n = predicted.len();
    let mut rmse = [0.0; 4];
    let mut voltage_errors = Vec::with_capacity(n);
    let mut reconstructed = Vec::with_capacity(n);
    let mut current_errors = Vec::with_capacity(n);
    for ((p, m), o) in predicted.iter().zip(measured).zip(onsets) {
        for c in 0..4 {
            rmse[c] += (p.0[c] - m.0[c]).powi(2);
        }
        voltage_errors.push((p.v_mean() - m.v_mean()).abs());
        let i_hat = reconstruct_current(p.current_phasor(), o.t, omega);
        reconstructed.push(i_hat);
        current_errors.push((i_hat - o.i).abs());
    }
    if n > 0 {
        for r in &mut rmse {
            *r = (*r / n as f64).sqrt();
        }
    }
    Ok(ValidationMetrics { rmse, voltage_errors, reconstructed, current_errors })
}
