//! Dense convex QP solver
//!
//! ```text
//! minimize   ½ xᵀ H x + gᵀ x
//! subject to lo ≤ A x ≤ hi
//! ```
//!
//! Operator splitting (ADMM) with over-relaxation and adaptive step, followed
//! by a polishing pass that solves the equality-constrained problem on the
//! detected active set. Problems are small (tens of variables), so all linear
//! algebra is dense.

use std::fmt::{self, Write as _};

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Bounds at or beyond this magnitude are treated as absent.
const INFTY: f64 = 1e20;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.h.shape() != (n, n) || self.a.shape() != (m, n) || self.hi.len() != m {
            return Err(Error::Dimension(format!(
                "H {:?}, g {}, A {:?}, lo {}, hi {}",
                self.h.shape(),
                n,
                self.a.shape(),
                m,
                self.hi.len()
            )));
        }
        let scale = self.h.amax().max(1.0);
        if (&self.h - self.h.transpose()).amax() > 1e-12 * scale {
            return Err(Error::config("QP cost matrix is not symmetric"));
        }
        if self.h.iter().chain(self.g.iter()).chain(self.a.iter()).any(|x| !x.is_finite()) {
            return Err(Error::config("non-finite QP data"));
        }
        for i in 0..m {
            if self.lo[i].is_nan() || self.hi[i].is_nan() || self.lo[i] > self.hi[i] {
                return Err(Error::config(format!(
                    "constraint {i}: bounds [{}, {}] are inconsistent",
                    self.lo[i], self.hi[i]
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Largest violation of `lo ≤ A x ≤ hi`.
    pub fn constraint_violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..self.m())
            .map(|i| (self.lo[i] - ax[i]).max(ax[i] - self.hi[i]).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Plain-text dump: `n m`, then H, g, A, lo, hi row-major.
    pub fn to_text(&self) -> String {
        let row = |v: &mut dyn Iterator<Item = f64>| v.map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        writeln!(out, "{} {}", self.n(), self.m()).unwrap();
        for r in 0..self.n() {
            writeln!(out, "{}", row(&mut self.h.row(r).iter().copied())).unwrap();
        }
        writeln!(out, "{}", row(&mut self.g.iter().copied())).unwrap();
        for r in 0..self.m() {
            writeln!(out, "{}", row(&mut self.a.row(r).iter().copied())).unwrap();
        }
        writeln!(out, "{}", row(&mut self.lo.iter().copied())).unwrap();
        writeln!(out, "{}", row(&mut self.hi.iter().copied())).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let mut next_row = |what: &str, len: usize| -> Result<Vec<f64>> {
            let (line_no, line) = lines.next().ok_or_else(|| Error::parse(format!("QP dump: missing {what}")))?;
            let values = line
                .split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|e| Error::parse(format!("QP dump line {line_no}: '{f}': {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != len {
                return Err(Error::parse(format!("QP dump: {what} has {} entries, expected {len}", values.len())));
            }
            Ok(values)
        };
        let dims = next_row("dimensions", 2)?;
        let (n, m) = (dims[0] as usize, dims[1] as usize);
        let mut h = Vec::with_capacity(n * n);
        for r in 0..n {
            h.extend(next_row(&format!("H row {r}"), n)?);
        }
        let g = next_row("g", n)?;
        let mut a = Vec::with_capacity(m * n);
        for r in 0..m {
            a.extend(next_row(&format!("A row {r}"), n)?);
        }
        let lo = if m > 0 { next_row("lo", m)? } else { vec![] };
        let hi = if m > 0 { next_row("hi", m)? } else { vec![] };
        let p = QpProblem {
            h: DMatrix::from_row_slice(n, n, &h),
            g: DVector::from_vec(g),
            a: DMatrix::from_row_slice(m, n, &a),
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Initial ADMM step ρ.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    /// Iterations between residual checks and ρ updates.
    pub check_every: usize,
    pub eps_infeasible: f64,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            check_every: 25,
            eps_infeasible: 1e-7,
            polish: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

impl fmt::Display for QpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max_iter",
            QpStatus::PrimalInfeasible => "infeasible_detected",
            QpStatus::DualInfeasible => "unbounded_detected",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers: negative on active lower bounds, positive on active upper bounds.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    /// ‖Hx + g + Aᵀy‖∞
    pub stationarity: f64,
    /// Largest bound violation of `A x`.
    pub primal: f64,
    /// Largest |yᵢ|·(distance to the bound its sign selects); wrong-signed
    /// multipliers on one-sided constraints count in full.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
    let stationarity = (&p.h * x + &p.g + p.a.transpose() * y).amax();
    let ax = &p.a * x;
    let mut complementarity = 0.0f64;
    for i in 0..p.m() {
        let c = if y[i] > 0.0 {
            if p.hi[i] >= INFTY { y[i] } else { y[i] * (p.hi[i] - ax[i]).abs() }
        } else if y[i] < 0.0 {
            if p.lo[i] <= -INFTY { -y[i] } else { -y[i] * (ax[i] - p.lo[i]).abs() }
        } else {
            0.0
        };
        complementarity = complementarity.max(c);
    }
    KktResiduals { stationarity, primal: p.constraint_violation(x), complementarity }
}

/// Primal-dual starting point.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

struct Admm<'a> {
    p: &'a QpProblem,
    s: QpSettings,
    rho: DVector<f64>,
    factor: Cholesky<f64, nalgebra::Dyn>,
}

impl<'a> Admm<'a> {
    fn new(p: &'a QpProblem, s: QpSettings, rho: f64) -> Result<Self> {
        let rho = row_rhos(p, rho);
        let factor = factorize(p, s.sigma, &rho)?;
        Ok(Admm { p, s, rho, factor })
    }

    fn set_rho(&mut self, rho: f64) -> Result<()> {
        self.rho = row_rhos(self.p, rho);
        self.factor = factorize(self.p, self.s.sigma, &self.rho)?;
        Ok(())
    }
}

fn row_rhos(p: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_fn(p.m(), |i, _| {
        let (lo, hi) = (p.lo[i], p.hi[i]);
        if lo <= -INFTY && hi >= INFTY {
            RHO_MIN
        } else if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            (RHO_EQ_SCALE * rho).min(RHO_MAX)
        } else {
            rho
        }
    })
}

fn factorize(p: &QpProblem, sigma: f64, rho: &DVector<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let mut k = p.h.clone();
    for i in 0..p.n() {
        k[(i, i)] += sigma;
    }
    let ra = DMatrix::from_fn(p.m(), p.n(), |r, c| rho[r] * p.a[(r, c)]);
    k += p.a.transpose() * ra;
    Cholesky::new(k).ok_or_else(|| Error::config("QP cost matrix is not positive semidefinite"))
}

fn project(v: &DVector<f64>, p: &QpProblem) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(p.lo[i], p.hi[i]))
}

/// Diagonal equilibration `x = D x̄`, rows scaled by `E`, cost scaled by `c`.
struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

impl Scaling {
    /// Ruiz equilibration of the KKT matrix followed by cost normalization.
    fn ruiz(p: &QpProblem, iterations: usize) -> (Scaling, QpProblem) {
        let (n, m) = (p.n(), p.m());
        let mut sc = Scaling { d: DVector::from_element(n, 1.0), e: DVector::from_element(m, 1.0), c: 1.0 };
        let mut q = p.clone();
        let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
        for _ in 0..iterations {
            let dd = DVector::from_fn(n, |j, _| {
                let col = q.h.column(j).amax().max(q.a.column(j).amax());
                1.0 / clamp(col).sqrt()
            });
            let de = DVector::from_fn(m, |i, _| 1.0 / clamp(q.a.row(i).amax()).sqrt());
            q.h = DMatrix::from_fn(n, n, |r, c| dd[r] * q.h[(r, c)] * dd[c]);
            q.a = DMatrix::from_fn(m, n, |r, c| de[r] * q.a[(r, c)] * dd[c]);
            q.g.component_mul_assign(&dd);
            sc.d.component_mul_assign(&dd);
            sc.e.component_mul_assign(&de);
        }
        let h_mean = if n > 0 { (0..n).map(|j| q.h.column(j).amax()).sum::<f64>() / n as f64 } else { 0.0 };
        sc.c = 1.0 / clamp(h_mean.max(q.g.amax()));
        q.h *= sc.c;
        q.g *= sc.c;
        q.lo = p.lo.component_mul(&sc.e);
        q.hi = p.hi.component_mul(&sc.e);
        (sc, q)
    }

    fn unscale_x(&self, x: &DVector<f64>) -> DVector<f64> {
        x.component_mul(&self.d)
    }

    fn unscale_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.component_mul(&self.e) / self.c
    }
}

pub fn solve_qp(p: &QpProblem, s: &QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    p.validate()?;
    if !(s.alpha > 0.0 && s.alpha < 2.0) || !(s.rho > 0.0) || !(s.sigma > 0.0) || s.check_every == 0 {
        return Err(Error::config("invalid QP solver settings"));
    }
    let (n, m) = (p.n(), p.m());
    let (sc, ps) = Scaling::ruiz(p, 10);
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some(w) = warm {
        if w.x.len() == n && w.y.len() == m && w.x.iter().chain(w.y.iter()).all(|v| v.is_finite()) {
            x = w.x.component_div(&sc.d);
            y = w.y.component_div(&sc.e) * sc.c;
        }
    }
    let mut z = project(&(&ps.a * &x), &ps);

    let mut admm = Admm::new(&ps, *s, s.rho)?;
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let at = ps.a.transpose();
    let mut polished = None;
    // Tolerances tighten whenever polishing cannot verify the ADMM point.
    let (mut eps_abs, mut eps_rel) = (s.eps_abs, s.eps_rel);
    let mut converged_once = false;

    for k in 1..=s.max_iter {
        iterations = k;
        let x_prev = x.clone();
        let y_prev = y.clone();

        let rhs = &x * s.sigma - &ps.g + &at * (admm.rho.component_mul(&z) - &y);
        let x_tilde = admm.factor.solve(&rhs);
        let z_tilde = &ps.a * &x_tilde;
        x = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
        let z_relaxed = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
        let z_next = project(&(&z_relaxed + y.component_div(&admm.rho)), &ps);
        y += admm.rho.component_mul(&(&z_relaxed - &z_next));
        z = z_next;

        if k % s.check_every != 0 && k != s.max_iter {
            continue;
        }
        // Residuals in the original units.
        let ax = (&ps.a * &x).component_div(&sc.e);
        let zu = z.component_div(&sc.e);
        let hx = (&ps.h * &x).component_div(&sc.d) / sc.c;
        let aty = (&at * &y).component_div(&sc.d) / sc.c;
        let g = &p.g;
        let r_prim = if m > 0 { (&ax - &zu).amax() } else { 0.0 };
        let r_dual = (&hx + g + &aty).amax();
        let prim_scale = if m > 0 { ax.amax().max(zu.amax()) } else { 0.0 };
        let dual_scale = hx.amax().max(aty.amax()).max(g.amax());
        if r_prim <= eps_abs + eps_rel * prim_scale && r_dual <= eps_abs + eps_rel * dual_scale {
            converged_once = true;
            if !s.polish {
                break;
            }
            polished = polish(p, &active_set(&ps, &z, &y), &sc.unscale_x(&x), &sc.unscale_y(&y), s);
            if polished.is_some() || eps_abs < 1e-13 {
                break;
            }
            eps_abs *= 0.1;
            eps_rel *= 0.1;
            continue;
        }
        if primal_infeasible(&ps, &(&y - &y_prev), s.eps_infeasible) {
            status = QpStatus::PrimalInfeasible;
            break;
        }
        if dual_infeasible(&ps, &(&x - &x_prev), s.eps_infeasible) {
            status = QpStatus::DualInfeasible;
            break;
        }
        if s.adaptive_rho && m > 0 {
            let ps_scaled = (&ps.a * &x).amax().max(z.amax()).max(1e-30);
            let ds_scaled = (&ps.h * &x).amax().max((&at * &y).amax()).max(ps.g.amax()).max(1e-30);
            let rp = (&ps.a * &x - &z).amax() / ps_scaled;
            let rd = (&ps.h * &x + &ps.g + &at * &y).amax() / ds_scaled;
            let rho = admm.rho.iter().copied().find(|&r| r > RHO_MIN).unwrap_or(s.rho);
            let proposed = (rho * (rp / rd.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if proposed > 5.0 * rho || proposed < 0.2 * rho {
                admm.set_rho(proposed)?;
            }
        }
    }

    let final_active = active_set(&ps, &z, &y);
    let mut x = sc.unscale_x(&x);
    let mut y = sc.unscale_y(&y);
    if converged_once {
        status = QpStatus::Optimal;
    }
    if s.polish && polished.is_none() && status == QpStatus::MaxIter {
        polished = polish(p, &final_active, &x, &y, s);
    }
    let was_polished = polished.is_some();
    if let Some((xp, yp)) = polished {
        x = xp;
        y = yp;
        status = QpStatus::Optimal;
    }

    let kkt = kkt_residuals(p, &x, &y);
    Ok(QpSolution {
        objective: p.objective(&x),
        x,
        y,
        status,
        iterations,
        polished: was_polished,
        primal_residual: kkt.primal,
        dual_residual: kkt.stationarity,
    })
}

/// Constraints the (scaled) ADMM iterate treats as binding.
fn active_set(ps: &QpProblem, z: &DVector<f64>, y: &DVector<f64>) -> Vec<(usize, Active)> {
    let mut active = Vec::new();
    for i in 0..ps.m() {
        if z[i] - ps.lo[i] < -y[i] {
            active.push((i, Active::Lower));
        } else if ps.hi[i] - z[i] < y[i] {
            active.push((i, Active::Upper));
        }
    }
    active
}

fn primal_infeasible(p: &QpProblem, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = dy.amax();
    if norm <= 1e-30 {
        return false;
    }
    if (p.a.transpose() * dy).amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..p.m() {
        if dy[i] > 0.0 {
            if p.hi[i] >= INFTY {
                return false;
            }
            support += p.hi[i] * dy[i];
        } else if dy[i] < 0.0 {
            if p.lo[i] <= -INFTY {
                return false;
            }
            support += p.lo[i] * dy[i];
        }
    }
    support < -eps * norm
}

fn dual_infeasible(p: &QpProblem, dx: &DVector<f64>, eps: f64) -> bool {
    let norm = dx.amax();
    if norm <= 1e-30 {
        return false;
    }
    if (&p.h * dx).amax() > eps * norm || p.g.dot(dx) > -eps * norm {
        return false;
    }
    let adx = &p.a * dx;
    (0..p.m()).all(|i| {
        let up_ok = p.hi[i] >= INFTY || adx[i] <= eps * norm;
        let down_ok = p.lo[i] <= -INFTY || adx[i] >= -eps * norm;
        up_ok && down_ok
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Active {
    Lower,
    Upper,
}

/// Starting from the ADMM active-set guess, solves the equality-constrained
/// KKT system and corrects the guess (drop wrong-signed multipliers, add
/// violated rows) until the point verifies. The result is kept only if it
/// satisfies the tolerances and is no worse than the ADMM iterate `(x, y)`.
fn polish(
    p: &QpProblem,
    active: &[(usize, Active)],
    x: &DVector<f64>,
    y: &DVector<f64>,
    s: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    const MAX_CORRECTIONS: usize = 30;
    let tol = |scale: f64| s.eps_abs + s.eps_rel * scale;
    // A tiny proximal term keeps the reduced system nonsingular when H is
    // only semidefinite; its effect shows up in the verified residuals.
    let delta = 1e-11 * p.h.amax().max(1.0);
    let before = kkt_residuals(p, x, y).max().max(tol(1.0));
    let mut active = active.to_vec();
    let mut seen = vec![active.clone()];
    for _ in 0..MAX_CORRECTIONS {
        let (xp, yp) =
            solve_on_active_set(p, &active, 0.0).or_else(|| solve_on_active_set(p, &active, delta))?;
        let kkt = kkt_residuals(p, &xp, &yp);
        let ax = &p.a * &xp;
        let dual_scale = (&p.h * &xp).amax().max((p.a.transpose() * &yp).amax()).max(p.g.amax());
        let y_tol = tol(yp.amax());
        let wrong_sign = |i: usize, side: Active| {
            let eq = p.hi[i] - p.lo[i] < 1e-12 * (1.0 + p.lo[i].abs());
            !eq && match side {
                Active::Lower => yp[i] > y_tol,
                Active::Upper => yp[i] < -y_tol,
            }
        };
        let sign_ok = active.iter().all(|&(i, side)| !wrong_sign(i, side));
        if sign_ok
            && kkt.primal <= tol(ax.amax())
            && kkt.stationarity <= tol(dual_scale)
            && xp.iter().chain(yp.iter()).all(|v| v.is_finite())
        {
            return (kkt.max() <= before).then_some((xp, yp));
        }
        // One change per pass: drop the worst multiplier, else add the
        // most violated row.
        let worst_sign = active
            .iter()
            .enumerate()
            .filter(|&(_, &(i, side))| wrong_sign(i, side))
            .max_by(|a, b| yp[a.1 .0].abs().total_cmp(&yp[b.1 .0].abs()));
        let mut next = active.clone();
        if let Some((pos, _)) = worst_sign {
            next.remove(pos);
        } else {
            let p_tol = tol(ax.amax());
            let violation = |i: usize| (p.lo[i] - ax[i]).max(ax[i] - p.hi[i]);
            let worst = (0..p.m())
                .filter(|&i| violation(i) > p_tol && !active.iter().any(|&(j, _)| j == i))
                .max_by(|&a, &b| violation(a).total_cmp(&violation(b)))?;
            let side = if ax[worst] < p.lo[worst] { Active::Lower } else { Active::Upper };
            next.push((worst, side));
            next.sort_by_key(|&(i, _)| i);
        }
        if seen.contains(&next) {
            return None;
        }
        seen.push(next.clone());
        active = next;
    }
    None
}

/// Stationary point of the QP with `active` rows held at their bounds and
/// the remaining constraints dropped. `None` if the reduced KKT matrix is
/// singular.
fn solve_on_active_set(
    p: &QpProblem,
    active: &[(usize, Active)],
    delta: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let (n, k) = (p.n(), active.len());
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&p.g));
    for (j, &(i, side)) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + j, c)] = p.a[(i, c)];
            kkt[(c, n + j)] = p.a[(i, c)];
        }
        rhs[n + j] = match side {
            Active::Lower => p.lo[i],
            Active::Upper => p.hi[i],
        };
        if rhs[n + j].abs() >= INFTY {
            return None;
        }
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // One step of iterative refinement.
    let correction = lu.solve(&(&rhs - &kkt * &sol))?;
    sol += correction;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut y = DVector::zeros(p.m());
    for (j, &(i, _)) in active.iter().enumerate() {
        y[i] = sol[n + j];
    }
    Some((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> QpProblem {
        let n = g.len();
        QpProblem { h, g, a: DMatrix::zeros(0, n), lo: DVector::zeros(0), hi: DVector::zeros(0) }
    }

    #[test]
    fn unconstrained_quadratic() {
        let p = unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -1.0]));
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn halfspace_projection() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::zeros(2),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            lo: DVector::from_vec(vec![2.0]),
            hi: DVector::from_vec(vec![f64::INFINITY]),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.polished);
        assert_abs_diff_eq!(sol.x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.x[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.y[0], -2.0, epsilon = 1e-12);
        assert!(kkt_residuals(&p, &sol.x, &sol.y).max() < 1e-12);
    }

    #[test]
    fn analytic_solution_has_zero_residuals() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            g: DVector::zeros(2),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            lo: DVector::from_vec(vec![2.0]),
            hi: DVector::from_vec(vec![f64::INFINITY]),
        };
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let y = DVector::from_vec(vec![-2.0]);
        let r = kkt_residuals(&p, &x, &y);
        assert!(r.max() < 1e-12);

        // Stationarity grows linearly with the size of a perturbation.
        let d = DVector::from_vec(vec![0.3, -0.4]);
        let r1 = kkt_residuals(&p, &(&x + &d * 1e-3), &y).stationarity;
        let r2 = kkt_residuals(&p, &(&x + &d * 2e-3), &y).stationarity;
        assert_abs_diff_eq!(r1, 0.4e-3, epsilon = 1e-12);
        assert_abs_diff_eq!(r2 / r1, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn detects_primal_infeasibility() {
        let p = QpProblem {
            h: DMatrix::identity(1, 1),
            g: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            lo: DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            hi: DVector::from_vec(vec![f64::INFINITY, 0.0]),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_unboundedness() {
        let p = QpProblem {
            h: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            g: DVector::from_vec(vec![0.0, -1.0]),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            lo: DVector::from_vec(vec![-1.0]),
            hi: DVector::from_vec(vec![1.0]),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn max_iter_returns_best_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_problem(&mut rng, 6, 12);
        let s = QpSettings { max_iter: 3, polish: false, check_every: 1, ..QpSettings::default() };
        let sol = solve_qp(&p, &s, None).unwrap();
        assert_eq!(sol.status, QpStatus::MaxIter);
        assert_eq!(sol.iterations, 3);
        assert!(sol.x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_malformed_problems() {
        let mut p = unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DVector::zeros(2));
        assert!(solve_qp(&p, &QpSettings::default(), None).is_err());
        p.h = DMatrix::identity(2, 2);
        p.a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        p.lo = DVector::from_vec(vec![1.0]);
        p.hi = DVector::from_vec(vec![0.0]);
        assert!(solve_qp(&p, &QpSettings::default(), None).is_err());
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
        let m_half = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &m_half * m_half.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        // x = 0 is strictly feasible.
        let lo = DVector::from_fn(m, |i, _| if i % 3 == 2 { f64::NEG_INFINITY } else { -rng.random_range(0.1..1.0) });
        let hi = DVector::from_fn(m, |i, _| if i % 4 == 3 { f64::INFINITY } else { rng.random_range(0.1..1.0) });
        QpProblem { h, g, a, lo, hi }
    }

    /// Enumerates active sets (each row inactive, at its lower or at its
    /// upper bound, at most `n` rows active) and returns the first point
    /// that satisfies all KKT conditions.
    fn enumerate_active_sets(p: &QpProblem) -> (DVector<f64>, DVector<f64>) {
        fn recurse(
            p: &QpProblem,
            row: usize,
            active: &mut Vec<(usize, Active)>,
        ) -> Option<(DVector<f64>, DVector<f64>)> {
            if row == p.m() {
                let (x, y) = solve_on_active_set(p, active, 0.0)?;
                let feasible = p.constraint_violation(&x) <= 1e-9;
                let signs = active.iter().all(|&(i, side)| match side {
                    Active::Lower => y[i] <= 1e-12,
                    Active::Upper => y[i] >= -1e-12,
                });
                return (feasible && signs).then_some((x, y));
            }
            if let Some(found) = recurse(p, row + 1, active) {
                return Some(found);
            }
            if active.len() == p.n() {
                return None;
            }
            for side in [Active::Lower, Active::Upper] {
                let bound = if side == Active::Lower { p.lo[row] } else { p.hi[row] };
                if !bound.is_finite() {
                    continue;
                }
                active.push((row, side));
                let found = recurse(p, row + 1, active);
                active.pop();
                if found.is_some() {
                    return found;
                }
            }
            None
        }
        recurse(p, 0, &mut Vec::new()).expect("strictly convex feasible QP has a KKT point")
    }

    #[test]
    fn matches_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let p = random_problem(&mut rng, 6, 12);
            let (x_ref, y_ref) = enumerate_active_sets(&p);
            let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!((&sol.x - &x_ref).amax() < 1e-5, "{} vs {}", sol.x, x_ref);
            let ours = kkt_residuals(&p, &sol.x, &sol.y);
            let oracle = kkt_residuals(&p, &x_ref, &y_ref);
            assert!((ours.max() - oracle.max()).abs() < 1e-5);
            assert!(ours.max() <= 1e-6);
            assert!((&sol.y - &y_ref).amax() < 1e-4);
        }
    }

    #[test]
    fn no_grid_point_beats_the_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let p = random_problem(&mut rng, 2, 4);
            let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
            assert_eq!(sol.status, QpStatus::Optimal);
            for a in -40..=40 {
                for b in -40..=40 {
                    let x = DVector::from_vec(vec![a as f64 * 0.05, b as f64 * 0.05]);
                    if p.constraint_violation(&x) == 0.0 {
                        assert!(p.objective(&x) >= sol.objective - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn warm_start_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_problem(&mut rng, 6, 12);
        let s = QpSettings { polish: false, ..QpSettings::default() };
        let cold = solve_qp(&p, &s, None).unwrap();
        let again = solve_qp(&p, &s, None).unwrap();
        assert_eq!(cold, again);
        let warm = solve_qp(&p, &s, Some(&WarmStart { x: cold.x.clone(), y: cold.y.clone() })).unwrap();
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= cold.iterations);
        // A mismatched warm start is ignored rather than trusted.
        let bad = WarmStart { x: DVector::zeros(3), y: DVector::zeros(1) };
        assert_eq!(solve_qp(&p, &s, Some(&bad)).unwrap(), cold);
    }

    #[test]
    fn dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_problem(&mut rng, 3, 5);
        let text = p.to_text();
        assert!(text.starts_with("3 5\n"));
        assert_eq!(QpProblem::from_text(&text).unwrap(), p);
        assert!(QpProblem::from_text("2 0\n1 0\n").is_err());
    }

    #[test]
    fn semidefinite_cost_with_box() {
        // H singular along x2; the box pins it down.
        let p = QpProblem {
            h: DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]),
            g: DVector::from_vec(vec![-2.0, 1.0]),
            a: DMatrix::identity(2, 2),
            lo: DVector::from_vec(vec![-5.0, -1.0]),
            hi: DVector::from_vec(vec![5.0, 1.0]),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], -1.0, epsilon = 1e-9);
    }
}
