//! Reference forward solver.
//!
//! Leapfrog (centered time, centered space) discretization of the horn
//! equation on a uniform grid, a second-order one-sided volume-velocity
//! condition at `x = 0` and the radiation condition at `x = L` closed by a
//! predictor-corrector iteration. The solver marches from rest until two
//! consecutive periods agree, and keeps the last period.
//!
//! The radiation condition is discretized at half steps,
//!
//! ```text
//! (rho c / A) (u[n+1] - u[n]) / dt = alpha (p[n+1] + p[n]) / 2 + beta (p[n+1] - p[n]) / dt
//! ```
//!
//! with `u = -A phi_x` from the one-sided stencil `(3 phi_N - 4 phi_N-1 + phi_N-2) / 2dx`
//! and `p = R A phi + rho phi_t` from the backward stencil
//! `(3 phi[n] - 4 phi[n-1] + phi[n-2]) / 2dt`. [`FdmSolution::native_boundary_signals`]
//! reports `p`, `p_t` and `u_t` with exactly these operators, so the
//! reported signals satisfy the radiation relation to corrector tolerance.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{
    AirProperties, DampingVariant, PdeCoefficients, RadiationCoefficients, SourceWaveform, TubeGeometry,
};

/// Solver settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdmConfig {
    /// Spatial node count (including both ends).
    pub nx: usize,
    /// Target Courant number; the realized one is at most this.
    pub courant: f64,
    pub max_periods: usize,
    /// Relative L∞ period-to-period tolerance on phi.
    pub steady_tol: f64,
    pub corrector_tol: f64,
    pub corrector_max_iter: usize,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            nx: 501,
            courant: 0.9,
            max_periods: 5000,
            steady_tol: 1e-8,
            corrector_tol: 1e-10,
            corrector_max_iter: 50,
        }
    }
}

/// Space-time grid. One period is exactly `steps_per_period` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdmGrid {
    pub nx: usize,
    pub dx: f64,
    pub dt: f64,
    pub courant: f64,
    pub steps_per_period: usize,
}

impl FdmGrid {
    pub fn new(length: f64, period: f64, c: f64, nx: usize, courant_target: f64) -> Result<Self> {
        if nx < 3 {
            return Err(Error::InvalidArgument(format!("need at least 3 nodes, got {nx}")));
        }
        if !(courant_target > 0.0 && courant_target <= 1.0) {
            return Err(Error::InvalidArgument(format!("Courant number must lie in (0, 1], got {courant_target}")));
        }
        let dx = length / (nx - 1) as f64;
        let steps_per_period = (period * c / (courant_target * dx)).ceil() as usize;
        let dt = period / steps_per_period as f64;
        Ok(Self { nx, dx, dt, courant: c * dt / dx, steps_per_period })
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }
}

/// Everything that defines a forward run.
#[derive(Clone, Debug)]
pub struct FdmProblem {
    pub geometry: TubeGeometry,
    pub air: AirProperties,
    pub source: SourceWaveform,
    pub radiation: RadiationCoefficients,
}

/// Per-node coefficients of the explicit interior update
/// `next[i] = plus[i] curr[i+1] + minus[i] curr[i-1] + center[i] curr[i] + prev_w[i] prev[i]`.
#[derive(Clone, Debug)]
pub struct Stencil {
    plus: Vec<f64>,
    minus: Vec<f64>,
    center: Vec<f64>,
    prev_w: Vec<f64>,
    /// `1 / (rho/(K dt^2) + damping/(2 dt))`, the weight of a forcing term.
    inv_diag: Vec<f64>,
}

impl Stencil {
    pub fn new(grid: &FdmGrid, geom: &TubeGeometry, air: &AirProperties) -> Self {
        let nx = grid.nx;
        let (dx, dt) = (grid.dx, grid.dt);
        let mut s = Self {
            plus: vec![0.0; nx],
            minus: vec![0.0; nx],
            center: vec![0.0; nx],
            prev_w: vec![0.0; nx],
            inv_diag: vec![0.0; nx],
        };
        for i in 0..nx {
            let k = PdeCoefficients::at(air, geom, grid.x(i), DampingVariant::Consistent);
            let a = k.inertia / (dt * dt);
            let b = k.damping / (2.0 * dt);
            let inv = 1.0 / (a + b);
            s.plus[i] = (1.0 / (dx * dx) + k.slope_ratio / (2.0 * dx)) * inv;
            s.minus[i] = (1.0 / (dx * dx) - k.slope_ratio / (2.0 * dx)) * inv;
            s.center[i] = (2.0 * a - 2.0 / (dx * dx) - k.gr) * inv;
            s.prev_w[i] = (b - a) * inv;
            s.inv_diag[i] = inv;
        }
        s
    }

    /// Interior update for nodes `1..nx-1`; the two boundary entries of
    /// `next` are left untouched. `forcing`, when given, is a pointwise
    /// source `F` with the equation read as `residual = F`. Returns the
    /// largest interior magnitude, or an instability error for non-finite
    /// output.
    pub fn interior_step(
        &self,
        step: usize,
        prev: &[f64],
        curr: &[f64],
        next: &mut [f64],
        forcing: Option<&[f64]>,
    ) -> Result<f64> {
        let n = curr.len();
        let mut peak = 0.0f64;
        let mut sum = 0.0;
        for i in 1..n - 1 {
            let mut v = self.plus[i] * curr[i + 1]
                + self.minus[i] * curr[i - 1]
                + self.center[i] * curr[i]
                + self.prev_w[i] * prev[i];
            if let Some(f) = forcing {
                v -= self.inv_diag[i] * f[i];
            }
            next[i] = v;
            peak = peak.max(v.abs());
            sum += v;
        }
        // f64::max drops NaN; the plain sum does not.
        if !(sum.is_finite() && peak.is_finite()) {
            let node = (1..n - 1).find(|&i| !next[i].is_finite()).unwrap_or(1);
            return Err(Error::Instability { step, node });
        }
        Ok(peak)
    }
}

/// Sets `row[0]` so that `-A(0) phi_x(0) = u_source`, using
/// `phi_x(0) ≈ (-3 phi_0 + 4 phi_1 - phi_2) / (2 dx)`.
pub fn apply_source_bc(row: &mut [f64], u_source: f64, area0: f64, dx: f64) {
    row[0] = (4.0 * row[1] - row[2] + 2.0 * dx * u_source / area0) / 3.0;
}

/// Discrete radiation condition at `x = L` together with its boundary state.
#[derive(Clone, Debug)]
pub struct RadiationBoundary {
    alpha: f64,
    beta: f64,
    area: f64,
    r: f64,
    rho: f64,
    /// `rho c / A` at the open end.
    impedance: f64,
    dx: f64,
    dt: f64,
    tol: f64,
    max_iter: usize,
    /// Boundary potential at levels n-2 and n-1 (relative to the level being left).
    phi_hist: [f64; 2],
    u_last: f64,
    p_last: f64,
    /// Largest corrector iteration count seen so far.
    pub max_iterations: usize,
}

impl RadiationBoundary {
    pub fn new(
        grid: &FdmGrid,
        geom: &TubeGeometry,
        air: &AirProperties,
        radiation: &RadiationCoefficients,
        tol: f64,
        max_iter: usize,
    ) -> Self {
        let length = geom.length();
        let area = geom.area(length);
        let (r, _) = crate::physics::loss_coefficients(air, geom, length);
        Self {
            alpha: radiation.alpha,
            beta: radiation.beta,
            area,
            r,
            rho: air.rho,
            impedance: air.rho_c() / area,
            dx: grid.dx,
            dt: grid.dt,
            tol,
            max_iter,
            phi_hist: [0.0; 2],
            u_last: 0.0,
            p_last: 0.0,
            max_iterations: 0,
        }
    }

    fn flow(&self, phi_n: f64, phi_n1: f64, phi_n2: f64) -> f64 {
        -self.area * (3.0 * phi_n - 4.0 * phi_n1 + phi_n2) / (2.0 * self.dx)
    }

    fn pressure(&self, phi: f64, phi_prev: f64, phi_prev2: f64) -> f64 {
        self.r * self.area * phi + self.rho * (3.0 * phi - 4.0 * phi_prev + phi_prev2) / (2.0 * self.dt)
    }

    /// Solves for `row[N]` at the new level given the interior nodes of
    /// `row` and the boundary value at the current level. `scale` is the
    /// field magnitude used for the relative stopping test.
    pub fn apply(&mut self, step: usize, row: &mut [f64], phi_curr: f64, scale: f64) -> Result<()> {
        let n = row.len() - 1;
        let (inner1, inner2) = (row[n - 1], row[n - 2]);
        let [phi_prev2, phi_prev1] = self.phi_hist;
        let residual = |b: &Self, phi: f64| {
            let u = b.flow(phi, inner1, inner2);
            let p = b.pressure(phi, phi_curr, phi_prev1);
            b.impedance * (u - b.u_last) / b.dt - b.alpha * 0.5 * (p + b.p_last) - b.beta * (p - b.p_last) / b.dt
        };
        let slope = self.impedance * (-3.0 * self.area / (2.0 * self.dx)) / self.dt
            - (0.5 * self.alpha + self.beta / self.dt) * (self.r * self.area + 3.0 * self.rho / (2.0 * self.dt));

        // Quadratic extrapolation from the three latest boundary values.
        let mut phi = 3.0 * phi_curr - 3.0 * phi_prev1 + phi_prev2;
        let floor = scale.abs().max(f64::MIN_POSITIVE);
        let mut iterations = 0;
        loop {
            iterations += 1;
            let next = phi - residual(self, phi) / slope;
            let change = (next - phi).abs();
            phi = next;
            if change <= self.tol * phi.abs().max(floor) {
                break;
            }
            if iterations >= self.max_iter || !phi.is_finite() {
                return Err(Error::CorrectorDiverged { step, residual: residual(self, phi) });
            }
        }
        self.max_iterations = self.max_iterations.max(iterations);
        row[n] = phi;
        self.u_last = self.flow(phi, inner1, inner2);
        self.p_last = self.pressure(phi, phi_curr, phi_prev1);
        self.phi_hist = [phi_prev1, phi_curr];
        Ok(())
    }
}

/// One steady-state period of the reference field.
#[derive(Clone, Debug)]
pub struct FdmSolution {
    pub grid: FdmGrid,
    pub length: f64,
    pub period: f64,
    /// Velocity potential, row `s` at `t = s dt`, `s = 0..steps_per_period`.
    pub phi: Array2<f64>,
    pub periods_run: usize,
    /// L∞ difference between the last two periods.
    pub steady_residual: f64,
    /// `steady_residual / max|phi|`.
    pub steady_residual_rel: f64,
    /// Relative change of the period L2 norm of `p` over the last two periods.
    pub energy_drift: f64,
    pub max_corrector_iterations: usize,
    pub first_period_peak: f64,
    pub run_peak: f64,
    /// Rows at levels -2, -1 and `steps_per_period`, from the actual time
    /// history, so boundary operators never straddle the periodic wrap.
    halo: [Vec<f64>; 3],
    area: Vec<f64>,
    r: Vec<f64>,
    rho: f64,
    impedance_out: f64,
    alpha: f64,
    beta: f64,
}

impl FdmSolution {
    pub fn max_abs_phi(&self) -> f64 {
        self.phi.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.grid.steps_per_period).map(|s| s as f64 * self.grid.dt).collect()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.grid.nx).map(|i| self.grid.x(i)).collect()
    }

    /// Pressure on the solver grid, `p = R A phi + rho phi_t` with the
    /// periodic centered time difference.
    pub fn pressure_field(&self) -> Array2<f64> {
        let steps = self.grid.steps_per_period;
        let dt2 = 2.0 * self.grid.dt;
        Array2::from_shape_fn((steps, self.grid.nx), |(s, i)| {
            let up = self.phi[[(s + 1) % steps, i]];
            let down = self.phi[[(s + steps - 1) % steps, i]];
            self.r[i] * self.area[i] * self.phi[[s, i]] + self.rho * (up - down) / dt2
        })
    }

    /// Volume velocity on the solver grid (centered differences inside,
    /// second-order one-sided at the ends).
    pub fn velocity_field(&self) -> Array2<f64> {
        let nx = self.grid.nx;
        let dx = self.grid.dx;
        Array2::from_shape_fn((self.grid.steps_per_period, nx), |(s, i)| {
            let f = |j: usize| self.phi[[s, j]];
            let phi_x = if i == 0 {
                (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * dx)
            } else if i == nx - 1 {
                (3.0 * f(i) - 4.0 * f(i - 1) + f(i - 2)) / (2.0 * dx)
            } else {
                (f(i + 1) - f(i - 1)) / (2.0 * dx)
            };
            -self.area[i] * phi_x
        })
    }

    /// Open-end `p`, `p_t`, `u_t` at the half steps `(s + 1/2) dt`, using the
    /// operators of the discrete radiation condition.
    pub fn native_boundary_signals(&self) -> BoundarySignals {
        let steps = self.grid.steps_per_period;
        let n = self.grid.nx - 1;
        let (dx, dt) = (self.grid.dx, self.grid.dt);
        let (area, r, rho) = (self.area[n], self.r[n], self.rho);
        let phi = |s: isize, i: usize| match s {
            -2 => self.halo[0][i],
            -1 => self.halo[1][i],
            s if s == steps as isize => self.halo[2][i],
            s => self.phi[[s as usize, i]],
        };
        let flow = |s: isize| -area * (3.0 * phi(s, n) - 4.0 * phi(s, n - 1) + phi(s, n - 2)) / (2.0 * dx);
        let pressure = |s: isize| {
            r * area * phi(s, n) + rho * (3.0 * phi(s, n) - 4.0 * phi(s - 1, n) + phi(s - 2, n)) / (2.0 * dt)
        };
        let mut out = BoundarySignals::with_capacity(steps);
        for s in 0..steps as isize {
            let (p0, p1) = (pressure(s), pressure(s + 1));
            out.times.push((s as f64 + 0.5) * dt);
            out.p.push(0.5 * (p0 + p1));
            out.p_t.push((p1 - p0) / dt);
            out.u_t.push((flow(s + 1) - flow(s)) / dt);
        }
        out.impedance = self.impedance_out;
        out
    }

    /// Open-end signals interpolated (periodic cubic) to arbitrary times.
    pub fn boundary_signals(&self, times: &[f64]) -> BoundarySignals {
        let native = self.native_boundary_signals();
        let dt = self.grid.dt;
        let t0 = 0.5 * dt;
        let mut out = BoundarySignals::with_capacity(times.len());
        for &t in times {
            out.times.push(t);
            out.p.push(periodic_cubic(&native.p, t0, dt, t));
            out.p_t.push(periodic_cubic(&native.p_t, t0, dt, t));
            out.u_t.push(periodic_cubic(&native.u_t, t0, dt, t));
        }
        out.impedance = self.impedance_out;
        out
    }

    /// Relative L2 residual of the radiation relation on native signals.
    pub fn radiation_residual(&self) -> f64 {
        self.native_boundary_signals().radiation_residual(self.alpha, self.beta)
    }

    /// Pressure and potential resampled onto a uniform `nt_out × nx_out`
    /// grid spanning `[0, T] × [0, L]` (both ends included).
    pub fn resample_to_grid(&self, nx_out: usize, nt_out: usize) -> Result<ResampledField> {
        let p = self.pressure_field();
        let phi = resample_periodic(&self.phi, self.grid.steps_per_period, nx_out, nt_out)?;
        let p = resample_periodic(&p, self.grid.steps_per_period, nx_out, nt_out)?;
        Ok(ResampledField { x: uniform_nodes(self.length, nx_out), t: uniform_nodes(self.period, nt_out), phi, p })
    }
}

/// Open-end time series.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundarySignals {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub p_t: Vec<f64>,
    pub u_t: Vec<f64>,
    /// `rho c / A` at the open end.
    pub impedance: f64,
}

impl BoundarySignals {
    fn with_capacity(n: usize) -> Self {
        Self {
            times: Vec::with_capacity(n),
            p: Vec::with_capacity(n),
            p_t: Vec::with_capacity(n),
            u_t: Vec::with_capacity(n),
            impedance: 0.0,
        }
    }

    /// `‖(rho c/A) u_t - alpha p - beta p_t‖ / ‖(rho c/A) u_t‖`.
    pub fn radiation_residual(&self, alpha: f64, beta: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..self.times.len() {
            let lhs = self.impedance * self.u_t[k];
            num += (lhs - alpha * self.p[k] - beta * self.p_t[k]).powi(2);
            den += lhs * lhs;
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

/// Field on the evaluation grid; arrays are `[time, space]`.
#[derive(Clone, Debug)]
pub struct ResampledField {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub phi: Array2<f64>,
    pub p: Array2<f64>,
}

/// `n` evenly spaced nodes on `[0, span]`, both ends included.
pub fn uniform_nodes(span: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| span * k as f64 / (n - 1) as f64).collect()
}

/// Four-point Lagrange interpolation of a periodic series sampled at
/// `t0 + s dt`.
pub fn periodic_cubic(values: &[f64], t0: f64, dt: f64, t: f64) -> f64 {
    let n = values.len() as isize;
    let pos = (t - t0) / dt;
    let base = pos.floor();
    lagrange4(pos - base, |k| values[((base as isize + k).rem_euclid(n)) as usize])
}

/// Cubic through samples at offsets -1, 0, 1, 2 evaluated at `u ∈ [0, 1)`.
fn lagrange4(u: f64, f: impl Fn(isize) -> f64) -> f64 {
    if u == 0.0 {
        return f(0);
    }
    let wm = -u * (u - 1.0) * (u - 2.0) / 6.0;
    let w0 = (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0;
    let w1 = -(u + 1.0) * u * (u - 2.0) / 2.0;
    let w2 = (u + 1.0) * u * (u - 1.0) / 6.0;
    wm * f(-1) + w0 * f(0) + w1 * f(1) + w2 * f(2)
}

/// Resamples a `[steps, nx]` periodic field onto `nt_out × nx_out`
/// uniform nodes: periodic cubic in time, linear in space. Output nodes
/// that coincide with input nodes are copied exactly.
pub fn resample_periodic(values: &Array2<f64>, steps: usize, nx_out: usize, nt_out: usize) -> Result<Array2<f64>> {
    if nx_out < 2 || nt_out < 2 {
        return Err(Error::InvalidArgument(format!(
            "output grid needs at least 2 points per axis, got {nx_out}×{nt_out}"
        )));
    }
    let nx_in = values.ncols();
    // Time first: one row per output time on the input spatial nodes.
    let mut temp = Array2::<f64>::zeros((nt_out, nx_in));
    for k in 0..nt_out {
        // Rational position keeps coincident nodes exact.
        let num = (k * steps) as f64;
        let den = (nt_out - 1) as f64;
        let pos = num / den;
        let base = pos.floor();
        let u = pos - base;
        let base = base as isize;
        for i in 0..nx_in {
            temp[[k, i]] = lagrange4(u, |o| values[[((base + o).rem_euclid(steps as isize)) as usize, i]]);
        }
    }
    Ok(interp_space(&temp, nx_out))
}

fn interp_space(rows: &Array2<f64>, nx_out: usize) -> Array2<f64> {
    let nx_in = rows.ncols();
    let mut out = Array2::<f64>::zeros((rows.nrows(), nx_out));
    for j in 0..nx_out {
        let pos = (j * (nx_in - 1)) as f64 / (nx_out - 1) as f64;
        let i = (pos.floor() as usize).min(nx_in - 2);
        let w = pos - i as f64;
        for k in 0..rows.nrows() {
            out[[k, j]] = if w == 0.0 { rows[[k, i]] } else { rows[[k, i]] * (1.0 - w) + rows[[k, i + 1]] * w };
        }
    }
    out
}

/// Marches from rest until consecutive periods agree and returns the last
/// period.
pub fn run_to_steady_state(problem: &FdmProblem, config: &FdmConfig) -> Result<FdmSolution> {
    let geom = &problem.geometry;
    let air = &problem.air;
    let period = problem.source.period;
    let grid = FdmGrid::new(geom.length(), period, air.c, config.nx, config.courant)?;
    let stencil = Stencil::new(&grid, geom, air);
    let mut radiation =
        RadiationBoundary::new(&grid, geom, air, &problem.radiation, config.corrector_tol, config.corrector_max_iter);
    let nx = grid.nx;
    let steps = grid.steps_per_period;
    let area0 = geom.area(0.0);
    // Source sampled on one period; level s corresponds to t = s dt.
    let source: Vec<f64> = (0..steps).map(|s| problem.source.flow(s as f64 * grid.dt)).collect();

    let mut prev = vec![0.0; nx];
    let mut curr = vec![0.0; nx];
    let mut next = vec![0.0; nx];
    let mut this_period = Array2::<f64>::zeros((steps, nx));
    let mut last_period = Array2::<f64>::zeros((steps, nx));
    let mut first_period_peak = 0.0f64;
    let mut run_peak = 0.0f64;
    let mut residual = f64::INFINITY;
    let mut row_scale = 0.0f64;

    for period_index in 0..config.max_periods {
        for s in 0..steps {
            this_period.row_mut(s).assign(&ndarray::ArrayView1::from(&curr[..]));
            let step = period_index * steps + s;
            let interior_peak = stencil.interior_step(step, &prev, &curr, &mut next, None)?;
            apply_source_bc(&mut next, source[(s + 1) % steps], area0, grid.dx);
            row_scale = row_scale.max(interior_peak);
            radiation.apply(step, &mut next, curr[nx - 1], row_scale)?;
            if !(next[0].is_finite() && next[nx - 1].is_finite()) {
                return Err(Error::Instability { step, node: if next[0].is_finite() { nx - 1 } else { 0 } });
            }
            std::mem::swap(&mut prev, &mut curr);
            std::mem::swap(&mut curr, &mut next);
        }
        let peak = this_period.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        run_peak = run_peak.max(peak);
        if period_index == 0 {
            first_period_peak = peak;
        }
        residual = this_period.iter().zip(last_period.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let residual_rel = if peak > 0.0 { residual / peak } else { 0.0 };
        let converged = residual <= config.steady_tol * peak;
        std::mem::swap(&mut this_period, &mut last_period);
        if converged {
            let halo = [this_period.row(steps - 2).to_vec(), this_period.row(steps - 1).to_vec(), curr.clone()];
            let mut sol = assemble(problem, grid, last_period, period_index + 1, halo);
            sol.steady_residual = residual;
            sol.steady_residual_rel = residual_rel;
            sol.first_period_peak = first_period_peak;
            sol.run_peak = run_peak;
            sol.max_corrector_iterations = radiation.max_iterations;
            let older = assemble(problem, grid, this_period, period_index, Default::default());
            let (e_new, e_old) = (pressure_norm(&sol), pressure_norm(&older));
            sol.energy_drift = if e_new > 0.0 { (e_new - e_old).abs() / e_new } else { 0.0 };
            return Ok(sol);
        }
    }
    Err(Error::NotSteady { periods: config.max_periods, residual })
}

/// Largest nodal error over one period when the scheme marches the
/// manufactured solution `cos(πx/L) sin(2πt/T)` from exact data. The horn
/// residual of the solution is added as forcing and its exact flux is
/// imposed at both ends with the one-sided boundary stencils.
pub fn manufactured_error(problem: &FdmProblem, nx: usize, courant: f64) -> Result<f64> {
    let geom = &problem.geometry;
    let air = &problem.air;
    let (l, period) = (geom.length(), problem.source.period);
    let grid = FdmGrid::new(l, period, air.c, nx, courant)?;
    let stencil = Stencil::new(&grid, geom, air);
    let (kx, kt) = (PI / l, 2.0 * PI / period);
    let exact = |x: f64, t: f64| (kx * x).cos() * (kt * t).sin();
    let flux = |x: f64, t: f64| geom.area(x) * kx * (kx * x).sin() * (kt * t).sin();
    let coef: Vec<PdeCoefficients> =
        (0..nx).map(|i| PdeCoefficients::at(air, geom, grid.x(i), DampingVariant::Consistent)).collect();
    let forcing = |t: f64, out: &mut [f64]| {
        for (i, f) in out.iter_mut().enumerate() {
            let x = grid.x(i);
            let (cx, sx, st, ct) = ((kx * x).cos(), (kx * x).sin(), (kt * t).sin(), (kt * t).cos());
            *f = coef[i].residual(cx * st, -kx * sx * st, kt * cx * ct, -kx * kx * cx * st, -kt * kt * cx * st);
        }
    };
    let row = |t: f64| -> Vec<f64> { (0..nx).map(|i| exact(grid.x(i), t)).collect() };
    let (mut prev, mut curr) = (row(-grid.dt), row(0.0));
    let mut next = vec![0.0; nx];
    let mut f = vec![0.0; nx];
    let (a0, al) = (geom.area(0.0), geom.area(l));
    let mut worst = 0.0f64;
    for s in 0..grid.steps_per_period {
        let t = s as f64 * grid.dt;
        forcing(t, &mut f);
        stencil.interior_step(s, &prev, &curr, &mut next, Some(&f))?;
        let t1 = t + grid.dt;
        apply_source_bc(&mut next, flux(0.0, t1), a0, grid.dx);
        let n = nx - 1;
        next[n] = (4.0 * next[n - 1] - next[n - 2] - 2.0 * grid.dx * flux(l, t1) / al) / 3.0;
        for (i, v) in next.iter().enumerate() {
            worst = worst.max((v - exact(grid.x(i), t1)).abs());
        }
        std::mem::swap(&mut prev, &mut curr);
        std::mem::swap(&mut curr, &mut next);
    }
    Ok(worst)
}

/// Observed orders `log2(e_k / e_{k+1})` for grids `nx_k = (n0 - 1) 2^k + 1`.
pub fn manufactured_orders(problem: &FdmProblem, n0: usize, refinements: usize, courant: f64) -> Result<Vec<f64>> {
    let errors = (0..=refinements)
        .map(|k| manufactured_error(problem, (n0 - 1) * (1 << k) + 1, courant))
        .collect::<Result<Vec<_>>>()?;
    Ok(errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

fn pressure_norm(sol: &FdmSolution) -> f64 {
    sol.pressure_field().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn assemble(
    problem: &FdmProblem,
    grid: FdmGrid,
    phi: Array2<f64>,
    periods_run: usize,
    halo: [Vec<f64>; 3],
) -> FdmSolution {
    let geom = &problem.geometry;
    let air = &problem.air;
    let area: Vec<f64> = (0..grid.nx).map(|i| geom.area(grid.x(i))).collect();
    let r: Vec<f64> = (0..grid.nx).map(|i| crate::physics::loss_coefficients(air, geom, grid.x(i)).0).collect();
    FdmSolution {
        grid,
        length: geom.length(),
        period: problem.source.period,
        phi,
        periods_run,
        steady_residual: 0.0,
        steady_residual_rel: 0.0,
        energy_drift: 0.0,
        max_corrector_iterations: 0,
        first_period_peak: 0.0,
        run_peak: 0.0,
        halo,
        impedance_out: air.rho_c() / area[grid.nx - 1],
        area,
        r,
        rho: air.rho,
        alpha: problem.radiation.alpha,
        beta: problem.radiation.beta,
    }
}
