//! Receding-horizon controller on the lifted linear model.
//!
//! Each period the measured lift `z` seeds the predictions
//! `ẑ[ℓ+1] = A ẑ[ℓ] + B u[k+ℓ]`, which are substituted into
//!
//! ```text
//! Σ_{ℓ=1..N_P} (ẑ[ℓ]−r)ᵀQ(ẑ[ℓ]−r) + Σ_{ℓ=0..N_P−1} Δu[ℓ]ᵀRΔu[ℓ] + w·Σ s
//! ```
//!
//! with hard input bounds and L1-softened bounds on (ẑ1, ẑ2). The decision
//! vector is `[u[k]; …; u[k+N_P−1]; s]`, one slack per softened component
//! and step.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4};

use crate::edmd::KoopmanModel;
use crate::error::{Error, Result};
use crate::gssa::{reference_vector, LiftedState};
use crate::params::{nominal_inputs, ConverterParams};
use crate::qp::{solve_qp, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};

/// Half-width of the input box around the nominal inputs.
pub const INPUT_MARGIN: f64 = 0.1;
pub const DEFAULT_SLACK_WEIGHT: f64 = 1e4;
pub const DEFAULT_SLACK_QUADRATIC: f64 = 1.0;
pub const DEFAULT_PF_MIN: f64 = 0.9;

/// `[lo, hi]` per component.
pub type Bounds2 = [[f64; 2]; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q: Matrix4<f64>,
    pub r: Matrix2<f64>,
    pub reference: LiftedState,
    pub u_bounds: Bounds2,
    /// Bounds on (ẑ1, ẑ2), applied for ℓ = 1..N_P.
    pub z_bounds: Bounds2,
    /// L1 weight on state-bound slacks; `None` makes the bounds hard.
    pub slack_weight: Option<f64>,
    /// Small quadratic weight on the slacks. It keeps the QP strictly convex
    /// without affecting exactness of the L1 penalty.
    pub slack_quadratic: f64,
    pub qp: QpSettings,
}

impl MpcConfig {
    /// Horizon 3, Q = diag(0,1,1,0), R = 0.1·I, bounds from the current
    /// limit and `pf_min`, all derived from the controller's view of the plant.
    pub fn new(p: &ConverterParams, pf_min: f64) -> Result<Self> {
        let (z_bounds, u_bounds) = build_bounds(p, pf_min)?;
        Ok(MpcConfig {
            horizon: 3,
            q: Matrix4::from_diagonal(&nalgebra::Vector4::new(0.0, 1.0, 1.0, 0.0)),
            r: Matrix2::identity() * 0.1,
            reference: reference_vector(p),
            u_bounds,
            z_bounds,
            slack_weight: Some(DEFAULT_SLACK_WEIGHT),
            slack_quadratic: DEFAULT_SLACK_QUADRATIC,
            qp: QpSettings::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("prediction horizon must be at least 1"));
        }
        let psd = |m: DMatrix<f64>, name: &str| -> Result<()> {
            if (&m - m.transpose()).amax() > 1e-12 {
                return Err(Error::config(format!("{name} is not symmetric")));
            }
            if m.symmetric_eigenvalues().iter().any(|&l| l < -1e-12) {
                return Err(Error::config(format!("{name} is not positive semidefinite")));
            }
            Ok(())
        };
        psd(DMatrix::from_iterator(4, 4, self.q.iter().copied()), "Q")?;
        psd(DMatrix::from_iterator(2, 2, self.r.iter().copied()), "R")?;
        for b in self.u_bounds.iter().chain(&self.z_bounds) {
            if !(b[0] <= b[1]) {
                return Err(Error::config(format!("bounds [{}, {}] are empty", b[0], b[1])));
            }
        }
        if let Some(w) = self.slack_weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::config(format!("slack weight must be positive, got {w}")));
            }
        }
        if !(self.slack_quadratic >= 0.0 && self.slack_quadratic.is_finite()) {
            return Err(Error::config(format!("slack quadratic weight must be non-negative, got {}", self.slack_quadratic)));
        }
        Ok(())
    }

    fn slack_count(&self) -> usize {
        if self.slack_weight.is_some() { 2 * self.horizon } else { 0 }
    }
}

/// State bounds for (z1, z2) and input bounds for (u1, u2).
///
/// A current of amplitude `i_limit` leading or lagging the grid by θ with
/// cos θ = `pf_min` has ⟨i⟩₁ = ±(i_limit/2)·sin θ − j(i_limit/2)·cos θ,
/// so z1 ∈ [−(i_limit/2)·pf_min, 0] and |z2| ≤ (i_limit/2)·√(1−pf_min²).
pub fn build_bounds(p: &ConverterParams, pf_min: f64) -> Result<(Bounds2, Bounds2)> {
    if !(pf_min > 0.0 && pf_min <= 1.0) {
        return Err(Error::config(format!("pf_min must be in (0, 1], got {pf_min}")));
    }
    let half = 0.5 * p.i_limit;
    let z2 = half * (1.0 - pf_min * pf_min).sqrt();
    let z_bounds = [[-half * pf_min, 0.0], [-z2, z2]];
    let u = nominal_inputs(p);
    let u_bounds = [
        [u[0] - INPUT_MARGIN, u[0] + INPUT_MARGIN],
        [u[1] - INPUT_MARGIN, u[1] + INPUT_MARGIN],
    ];
    Ok((z_bounds, u_bounds))
}

/// Dense QP of one control period plus what is needed to read it back.
#[derive(Clone, Debug)]
pub struct CondensedMpc {
    pub qp: QpProblem,
    /// Ẑ = Φ z + Γ U, stacked over ℓ = 1..N_P.
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    /// Cost terms independent of the decision vector.
    pub constant: f64,
}

/// Condenses the horizon into `½xᵀHx + gᵀx` over `x = [U; s]`.
pub fn condense(
    model: &KoopmanModel,
    cfg: &MpcConfig,
    z: &LiftedState,
    u_prev: [f64; 2],
) -> Result<CondensedMpc> {
    cfg.validate()?;
    let np = cfg.horizon;
    let nu = 2 * np;
    let ns = cfg.slack_count();
    let n = nu + ns;

    let a = DMatrix::from_iterator(4, 4, model.a.iter().copied());
    let b = DMatrix::from_iterator(4, 2, model.b.iter().copied());
    let mut phi = DMatrix::zeros(4 * np, 4);
    let mut gamma = DMatrix::zeros(4 * np, nu);
    let mut a_pow = DMatrix::identity(4, 4);
    for l in 0..np {
        // Block row l holds ẑ[l+1]; column block j multiplies u[k+j].
        for j in 0..l {
            let block = &a * gamma.view((4 * (l - 1), 2 * j), (4, 2));
            gamma.view_mut((4 * l, 2 * j), (4, 2)).copy_from(&block);
        }
        gamma.view_mut((4 * l, 2 * l), (4, 2)).copy_from(&b);
        a_pow = &a * a_pow;
        phi.view_mut((4 * l, 0), (4, 4)).copy_from(&a_pow);
    }

    let z0 = DVector::from_column_slice(&z.0);
    let r = DVector::from_column_slice(&cfg.reference.0);
    let mut q_bar = DMatrix::zeros(4 * np, 4 * np);
    let mut r_bar = DMatrix::zeros(nu, nu);
    let q = DMatrix::from_iterator(4, 4, cfg.q.iter().copied());
    let rr = DMatrix::from_iterator(2, 2, cfg.r.iter().copied());
    let mut free = phi.clone() * &z0;
    for l in 0..np {
        q_bar.view_mut((4 * l, 4 * l), (4, 4)).copy_from(&q);
        r_bar.view_mut((2 * l, 2 * l), (2, 2)).copy_from(&rr);
        let mut seg = free.rows_mut(4 * l, 4);
        seg -= &r;
    }
    // Δu = D U − d0 with d0 = [u_prev; 0; …].
    let mut d = DMatrix::identity(nu, nu);
    for l in 1..np {
        d[(2 * l, 2 * (l - 1))] = -1.0;
        d[(2 * l + 1, 2 * (l - 1) + 1)] = -1.0;
    }
    let mut d0 = DVector::zeros(nu);
    d0[0] = u_prev[0];
    d0[1] = u_prev[1];

    let h_u = (gamma.transpose() * &q_bar * &gamma + d.transpose() * &r_bar * &d) * 2.0;
    let g_u = (gamma.transpose() * &q_bar * &free - d.transpose() * &r_bar * &d0) * 2.0;
    let constant = free.dot(&(&q_bar * &free)) + d0.dot(&(&r_bar * &d0));

    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (nu, nu)).copy_from(&h_u);
    let mut h = (&h + h.transpose()) * 0.5;
    let mut g = DVector::zeros(n);
    g.rows_mut(0, nu).copy_from(&g_u);
    if let Some(w) = cfg.slack_weight {
        g.rows_mut(nu, ns).fill(w);
        for i in nu..n {
            h[(i, i)] = 2.0 * cfg.slack_quadratic;
        }
    }

    // Rows: input box, lower z bounds, upper z bounds, slack ≥ 0.
    let m = nu + 2 * nu + ns;
    let mut a_ineq = DMatrix::zeros(m, n);
    let mut lo = DVector::zeros(m);
    let mut hi = DVector::zeros(m);
    for l in 0..np {
        for c in 0..2 {
            let row = 2 * l + c;
            a_ineq[(row, row)] = 1.0;
            lo[row] = cfg.u_bounds[c][0];
            hi[row] = cfg.u_bounds[c][1];

            let zrow = 4 * l + c;
            let (lo_row, hi_row) = (nu + row, 2 * nu + row);
            for j in 0..nu {
                a_ineq[(lo_row, j)] = gamma[(zrow, j)];
                a_ineq[(hi_row, j)] = gamma[(zrow, j)];
            }
            let offset = free[zrow] + r[zrow % 4];
            lo[lo_row] = cfg.z_bounds[c][0] - offset;
            hi[lo_row] = f64::INFINITY;
            lo[hi_row] = f64::NEG_INFINITY;
            hi[hi_row] = cfg.z_bounds[c][1] - offset;
            if cfg.slack_weight.is_some() {
                a_ineq[(lo_row, nu + row)] = 1.0;
                a_ineq[(hi_row, nu + row)] = -1.0;
                let s_row = 3 * nu + row;
                a_ineq[(s_row, nu + row)] = 1.0;
                lo[s_row] = 0.0;
                hi[s_row] = f64::INFINITY;
            }
        }
    }

    Ok(CondensedMpc { qp: QpProblem { h, g, a: a_ineq, lo, hi }, phi, gamma, constant })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub k: usize,
    pub z: LiftedState,
    pub u: [f64; 2],
    /// Full horizon cost at the returned solution, slack penalty included.
    pub cost: f64,
    pub slack_max: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub kkt_max: f64,
    /// ẑ[1..=N_P] under the optimal input sequence.
    pub predicted: Vec<LiftedState>,
}

pub struct KmpcController {
    model: KoopmanModel,
    cfg: MpcConfig,
    u_prev: [f64; 2],
    warm: Option<WarmStart>,
    k: usize,
    last_problem: Option<QpProblem>,
}

impl KmpcController {
    /// `u_start` anchors the first input increment (normally the nominal inputs).
    pub fn new(model: KoopmanModel, cfg: MpcConfig, u_start: [f64; 2]) -> Result<Self> {
        cfg.validate()?;
        if !model.is_finite() {
            return Err(Error::config("model contains non-finite entries"));
        }
        Ok(KmpcController { model, cfg, u_prev: u_start, warm: None, k: 0, last_problem: None })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn model(&self) -> &KoopmanModel {
        &self.model
    }

    pub fn u_prev(&self) -> [f64; 2] {
        self.u_prev
    }

    /// QP solved by the most recent step.
    pub fn last_problem(&self) -> Option<&QpProblem> {
        self.last_problem.as_ref()
    }

    /// Solves the period's QP and returns the first input of the optimal
    /// sequence. Control never halts: a non-optimal solve applies the best
    /// iterate (or holds the previous input if none is usable), clamped to
    /// the input box, and is flagged in the diagnostics.
    pub fn step(&mut self, z: &LiftedState) -> Result<([f64; 2], StepDiagnostics)> {
        if !z.is_finite() {
            return Err(Error::config("non-finite lifted state"));
        }
        let cond = condense(&self.model, &self.cfg, z, self.u_prev)?;
        let sol = solve_qp(&cond.qp, &self.cfg.qp, self.warm.as_ref())?;
        let usable = matches!(sol.status, QpStatus::Optimal | QpStatus::MaxIter)
            && sol.x.iter().all(|v| v.is_finite());
        let raw = if usable { [sol.x[0], sol.x[1]] } else { self.u_prev };
        let u = [
            raw[0].clamp(self.cfg.u_bounds[0][0], self.cfg.u_bounds[0][1]),
            raw[1].clamp(self.cfg.u_bounds[1][0], self.cfg.u_bounds[1][1]),
        ];

        let nu = 2 * self.cfg.horizon;
        let ns = self.cfg.slack_count();
        let slack_max = if ns > 0 && usable { sol.x.rows(nu, ns).max().max(0.0) } else { 0.0 };
        let z0 = DVector::from_column_slice(&z.0);
        let stacked = &cond.phi * z0 + &cond.gamma * sol.x.rows(0, nu);
        let predicted = (0..self.cfg.horizon)
            .map(|l| LiftedState(std::array::from_fn(|c| stacked[4 * l + c])))
            .collect();
        let diag = StepDiagnostics {
            k: self.k,
            z: *z,
            u,
            cost: sol.objective + cond.constant,
            slack_max,
            iterations: sol.iterations,
            status: sol.status,
            kkt_max: crate::qp::kkt_residuals(&cond.qp, &sol.x, &sol.y).max(),
            predicted,
        };
        if sol.status != QpStatus::Optimal {
            log::warn!("period {}: QP status {} after {} iterations", self.k, sol.status, sol.iterations);
        }

        self.warm = usable.then(|| shifted_warm_start(&sol, self.cfg.horizon, ns));
        self.u_prev = u;
        self.k += 1;
        self.last_problem = Some(cond.qp);
        Ok((u, diag))
    }
}

/// Moves each per-step block one step forward, repeating the last block.
fn shift_blocks(v: &mut [f64], horizon: usize) {
    if horizon < 2 {
        return;
    }
    let len = v.len();
    v.copy_within(2..len, 0);
    v.copy_within(len - 4..len - 2, len - 2);
}

fn shifted_warm_start(sol: &QpSolution, horizon: usize, ns: usize) -> WarmStart {
    let nu = 2 * horizon;
    let mut x = sol.x.clone();
    shift_blocks(&mut x.as_mut_slice()[..nu], horizon);
    if ns > 0 {
        shift_blocks(&mut x.as_mut_slice()[nu..nu + ns], horizon);
    }
    let mut y = sol.y.clone();
    let groups = y.len() / nu;
    for gi in 0..groups {
        shift_blocks(&mut y.as_mut_slice()[gi * nu..(gi + 1) * nu], horizon);
    }
    WarmStart { x, y }
}

pub const DIAGNOSTICS_HEADER: &str = "k,z1,z2,z3,z4,u1,u2,cost,slack_max,solver_iters,status";

pub fn diagnostics_row(d: &StepDiagnostics) -> String {
    let mut s = String::new();
    write!(
        s,
        "{},{},{},{},{},{},{},{},{},{},{}",
        d.k, d.z.0[0], d.z.0[1], d.z.0[2], d.z.0[3], d.u[0], d.u[1], d.cost, d.slack_max, d.iterations, d.status
    )
    .unwrap();
    s
}

pub fn write_diagnostics_csv(w: &mut impl std::io::Write, rows: &[StepDiagnostics]) -> Result<()> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for d in rows {
        writeln!(w, "{}", diagnostics_row(d))?;
    }
    Ok(())
}
