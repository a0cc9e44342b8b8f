//! Collocation sets, the loss families and their exact gradients.

use serde::{Deserialize, Serialize};

use super::sobol::sobol2d;
use crate::diffnet::{
    evaluate, evaluate_with_gradient, Architecture, Batch, Channel, ChannelSet, ChunkView, FieldEval, NetworkParams,
    DEFAULT_CHUNK,
};
use crate::physics::{AirProperties, DampingVariant, PdeCoefficients, SourceWaveform, TubeGeometry};
use crate::{Error, Result};

/// Number of points in each collocation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollocationConfig {
    pub n_pde: usize,
    pub n_bc: usize,
    pub n_pc: usize,
    pub n_obs: usize,
    /// Index of the first Sobol point used.
    pub sobol_skip: usize,
}

impl Default for CollocationConfig {
    fn default() -> Self {
        Self { n_pde: 5000, n_bc: 1000, n_pc: 1000, n_obs: 1000, sobol_skip: 1 }
    }
}

/// Collocation points on `[0, L] × [0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollocationSets {
    pub pde_x: Vec<f64>,
    pub pde_t: Vec<f64>,
    /// Times at `x = 0`.
    pub bc_times: Vec<f64>,
    /// Positions paired at `t = 0` and `t = T`.
    pub pc_x: Vec<f64>,
    /// Times at `x = L`.
    pub obs_times: Vec<f64>,
}

/// `n` times `k T / n`, `k = 0..n`: uniform on `[0, T)`.
pub fn periodic_times(period: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * period / n as f64).collect()
}

impl CollocationSets {
    pub fn new(cfg: &CollocationConfig, length: f64, period: f64) -> Result<Self> {
        if cfg.n_pde == 0 || cfg.n_bc == 0 || cfg.n_pc == 0 || cfg.n_obs == 0 {
            return Err(Error::Config("collocation counts must be positive".into()));
        }
        let (pde_x, pde_t) =
            sobol2d(cfg.n_pde, cfg.sobol_skip).into_iter().map(|[a, b]| (a * length, b * period)).unzip();
        let pc_x = if cfg.n_pc == 1 {
            vec![0.5 * length]
        } else {
            (0..cfg.n_pc).map(|k| k as f64 * length / (cfg.n_pc - 1) as f64).collect()
        };
        Ok(Self {
            pde_x,
            pde_t,
            bc_times: periodic_times(period, cfg.n_bc),
            pc_x,
            obs_times: periodic_times(period, cfg.n_obs),
        })
    }
}

/// Loss-term weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pde: f64,
    pub bc: f64,
    pub obs: f64,
    pub pc: f64,
    pub pc_u: f64,
    pub pc_p: f64,
    pub pc_phi_tt: f64,
    /// Radiation-residual term; only active while estimating `alpha`, `beta`.
    pub rad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pde: 5e-6, bc: 3.4e5, obs: 1.0, pc: 1.0, pc_u: 5e4, pc_p: 1.0, pc_phi_tt: 1e-8, rad: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pde, self.bc, self.obs, self.pc, self.pc_u, self.pc_p, self.pc_phi_tt, self.rad];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and nonnegative".into()))
        }
    }
}

/// Unweighted partial losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub pde: f64,
    pub bc: f64,
    pub obs: f64,
    pub pc_u: f64,
    pub pc_p: f64,
    pub pc_phi_tt: f64,
    pub rad: f64,
}

/// Weighted sum of the partial losses.
pub fn total_loss(t: &LossTerms, w: &LossWeights) -> f64 {
    w.pde * t.pde
        + w.bc * t.bc
        + w.obs * t.obs
        + w.pc * (w.pc_u * t.pc_u + w.pc_p * t.pc_p + w.pc_phi_tt * t.pc_phi_tt)
        + w.rad * t.rad
}

/// Pressure observations at the open end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationData {
    pub times: Vec<f64>,
    pub pressures: Vec<f64>,
    /// Realized signal-to-noise ratio in dB (infinite for clean data).
    pub snr_db: f64,
    pub noise_seed: u64,
}

impl ObservationData {
    pub fn validate(&self, period: f64) -> Result<()> {
        if self.times.len() != self.pressures.len() || self.times.is_empty() {
            return Err(Error::InvalidArgument("observation times and pressures differ in length".into()));
        }
        let inside = self.times.iter().all(|t| (0.0..=period).contains(t));
        let increasing = self.times.windows(2).all(|w| w[1] > w[0]);
        if !(inside && increasing) {
            return Err(Error::InvalidArgument("observation times must increase within [0, T]".into()));
        }
        Ok(())
    }
}

/// Horn-equation residual at each point.
pub fn pde_residual(e: &FieldEval, coef: &[PdeCoefficients]) -> Vec<f64> {
    (0..e.len()).map(|i| coef[i].residual(e.phi[i], e.phi_x[i], e.phi_t[i], e.phi_xx[i], e.phi_tt[i])).collect()
}

fn mean_square(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.map(|r| r * r).sum::<f64>() / n as f64
}

pub fn loss_pde(e: &FieldEval, coef: &[PdeCoefficients]) -> f64 {
    mean_square(pde_residual(e, coef).into_iter(), e.len())
}

/// Mean squared mismatch between `-A(0) φ_x` and the source flow.
pub fn loss_bc(e: &FieldEval, area0: f64, u_source: &[f64]) -> f64 {
    mean_square((0..e.len()).map(|i| e.velocity(i, area0) - u_source[i]), e.len())
}

/// Periodicity mismatches between slices at `t = 0` and `t = T`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PcLosses {
    pub u: f64,
    pub p: f64,
    pub phi_tt: f64,
}

/// `r_area[i]` holds `(R, A)` at the i-th position.
pub fn loss_pc(e0: &FieldEval, e1: &FieldEval, r_area: &[(f64, f64)], rho: f64) -> PcLosses {
    let n = e0.len();
    let du = (0..n).map(|i| e0.velocity(i, r_area[i].1) - e1.velocity(i, r_area[i].1));
    let dp = (0..n).map(|i| {
        let (r, a) = r_area[i];
        e0.pressure(i, r, a, rho) - e1.pressure(i, r, a, rho)
    });
    let dtt = (0..n).map(|i| e0.phi_tt[i] - e1.phi_tt[i]);
    PcLosses { u: mean_square(du, n), p: mean_square(dp, n), phi_tt: mean_square(dtt, n) }
}

/// Mean squared mismatch between predicted and observed pressure.
pub fn loss_obs(e: &FieldEval, r: f64, area: f64, rho: f64, p_obs: &[f64]) -> f64 {
    mean_square((0..e.len()).map(|i| e.pressure(i, r, area, rho) - p_obs[i]), e.len())
}

/// `(ρc/A) u_t - α p - β p_t` at each point of an open-end evaluation.
pub fn radiation_residual(e: &FieldEval, end: &EndCoefficients, alpha: f64, beta: f64) -> Vec<f64> {
    (0..e.len())
        .map(|i| {
            end.impedance * e.velocity_t(i, end.area)
                - alpha * e.pressure(i, end.r, end.area, end.rho)
                - beta * e.pressure_t(i, end.r, end.area, end.rho)
        })
        .collect()
}

/// Coefficients at the open end `x = L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EndCoefficients {
    pub r: f64,
    pub area: f64,
    pub rho: f64,
    /// `ρ c / A`.
    pub impedance: f64,
}

/// Physical inputs to the losses.
pub struct PhysicsSetup<'a> {
    pub geometry: &'a TubeGeometry,
    pub air: &'a AirProperties,
    pub source: &'a SourceWaveform,
    pub damping: DampingVariant,
}

/// Batches and pointwise coefficients for every loss family, built once.
pub struct LossContext {
    pde: Batch,
    pde_coef: Vec<PdeCoefficients>,
    bc: Batch,
    bc_source: Vec<f64>,
    area0: f64,
    pc: Batch,
    pc_coef: Vec<(f64, f64)>,
    obs: Batch,
    obs_p: Vec<f64>,
    end: EndCoefficients,
    radiation: bool,
}

/// Loss value, its parts, and the gradient with respect to `(α, β)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEvaluation {
    pub terms: LossTerms,
    pub total: f64,
    pub grad_rad: [f64; 2],
}

impl LossContext {
    /// With `radiation` the open-end batch also carries `φ_tt` and `φ_xt`
    /// so the radiation residual can be formed.
    pub fn new(
        params: &NetworkParams,
        sets: &CollocationSets,
        setup: &PhysicsSetup<'_>,
        obs: &ObservationData,
        radiation: bool,
    ) -> Result<Self> {
        let geom = setup.geometry;
        let air = setup.air;
        let l = geom.length();
        let period = setup.source.period;
        obs.validate(period)?;
        let chunk = DEFAULT_CHUNK;
        let pde = Batch::new(
            params,
            sets.pde_x.clone(),
            sets.pde_t.clone(),
            ChannelSet::new(&[Channel::XX, Channel::TT]),
            chunk,
        )?;
        let pde_coef = sets.pde_x.iter().map(|&x| PdeCoefficients::at(air, geom, x, setup.damping)).collect();
        let bc = Batch::new(
            params,
            vec![0.0; sets.bc_times.len()],
            sets.bc_times.clone(),
            ChannelSet::new(&[Channel::X]),
            chunk,
        )?;
        let bc_source = sets.bc_times.iter().map(|&t| setup.source.flow(t)).collect();
        let mut pc_xs = Vec::with_capacity(2 * sets.pc_x.len());
        let mut pc_ts = Vec::with_capacity(2 * sets.pc_x.len());
        for &x in &sets.pc_x {
            pc_xs.extend([x, x]);
            pc_ts.extend([0.0, period]);
        }
        let pc = Batch::new(params, pc_xs, pc_ts, ChannelSet::new(&[Channel::X, Channel::T, Channel::TT]), chunk)?;
        let pc_coef =
            sets.pc_x.iter().map(|&x| (crate::physics::loss_coefficients(air, geom, x).0, geom.area(x))).collect();
        let obs_channels =
            if radiation { ChannelSet::new(&[Channel::TT, Channel::XT]) } else { ChannelSet::new(&[Channel::T]) };
        let obs_batch = Batch::new(params, vec![l; obs.times.len()], obs.times.clone(), obs_channels, chunk)?;
        let area_l = geom.area(l);
        let end = EndCoefficients {
            r: crate::physics::loss_coefficients(air, geom, l).0,
            area: area_l,
            rho: air.rho,
            impedance: air.rho_c() / area_l,
        };
        Ok(Self {
            pde,
            pde_coef,
            bc,
            bc_source,
            area0: geom.area(0.0),
            pc,
            pc_coef,
            obs: obs_batch,
            obs_p: obs.pressures.clone(),
            end,
            radiation,
        })
    }

    pub fn end(&self) -> EndCoefficients {
        self.end
    }

    /// Loss, and when `grad` is given its gradient added into `grad`.
    /// `rad` supplies `(α, β)` for the radiation term, which needs a
    /// context built with `radiation = true`.
    pub fn evaluate(
        &self,
        arch: &Architecture,
        w: &[f64],
        weights: &LossWeights,
        rad: Option<[f64; 2]>,
        grad: Option<&mut [f64]>,
    ) -> Result<LossEvaluation> {
        if rad.is_some() && !self.radiation {
            return Err(Error::InvalidArgument("context built without radiation channels".into()));
        }
        let mut terms = LossTerms::default();
        let mut grad_rad = [0.0; 2];
        let mut grad = grad;
        {
            let n = self.pde.len() as f64;
            let s = 2.0 * weights.pde / n;
            let mut acc = 0.0;
            run(arch, w, &self.pde, grad.as_deref_mut(), "PDE loss", |v, e| Ok(self.pde_chunk(v, e, s, &mut acc)))?;
            terms.pde = acc / n;
        }
        {
            let n = self.bc.len() as f64;
            let s = 2.0 * weights.bc / n;
            let mut acc = 0.0;
            run(arch, w, &self.bc, grad.as_deref_mut(), "BC loss", |v, e| Ok(self.bc_chunk(v, e, s, &mut acc)))?;
            terms.bc = acc / n;
        }
        {
            let n = (self.pc.len() / 2) as f64;
            let s = [
                2.0 * weights.pc * weights.pc_u / n,
                2.0 * weights.pc * weights.pc_p / n,
                2.0 * weights.pc * weights.pc_phi_tt / n,
            ];
            let mut acc = [0.0; 3];
            run(arch, w, &self.pc, grad.as_deref_mut(), "periodicity loss", |v, e| self.pc_chunk(v, e, s, &mut acc))?;
            terms.pc_u = acc[0] / n;
            terms.pc_p = acc[1] / n;
            terms.pc_phi_tt = acc[2] / n;
        }
        {
            let n = self.obs.len() as f64;
            let s = [2.0 * weights.obs / n, 2.0 * weights.rad / n];
            let mut acc = [0.0; 2];
            run(arch, w, &self.obs, grad, "observation loss", |v, e| {
                Ok(self.obs_chunk(v, e, s, rad, &mut acc, &mut grad_rad))
            })?;
            terms.obs = acc[0] / n;
            terms.rad = acc[1] / n;
        }
        let total = total_loss(&terms, weights);
        if !total.is_finite() {
            return Err(Error::NonFinite { location: "total loss".into() });
        }
        Ok(LossEvaluation { terms, total, grad_rad })
    }

    fn pde_chunk(&self, v: ChunkView<'_>, e: &FieldEval, s: f64, acc: &mut f64) -> FieldEval {
        let m = e.len();
        let mut adj = FieldEval::zeros(m, ChannelSet::new(&[Channel::XX, Channel::TT]));
        for j in 0..m {
            let c = &self.pde_coef[v.start + j];
            let r = c.residual(e.phi[j], e.phi_x[j], e.phi_t[j], e.phi_xx[j], e.phi_tt[j]);
            *acc += r * r;
            let g = s * r;
            adj.phi[j] = -c.gr * g;
            adj.phi_x[j] = c.slope_ratio * g;
            adj.phi_t[j] = -c.damping * g;
            adj.phi_xx[j] = g;
            adj.phi_tt[j] = -c.inertia * g;
        }
        adj
    }

    fn bc_chunk(&self, v: ChunkView<'_>, e: &FieldEval, s: f64, acc: &mut f64) -> FieldEval {
        let m = e.len();
        let mut adj = FieldEval { phi_x: vec![0.0; m], ..Default::default() };
        for j in 0..m {
            let d = e.velocity(j, self.area0) - self.bc_source[v.start + j];
            *acc += d * d;
            adj.phi_x[j] = -self.area0 * s * d;
        }
        adj
    }

    fn pc_chunk(&self, v: ChunkView<'_>, e: &FieldEval, s: [f64; 3], acc: &mut [f64; 3]) -> Result<FieldEval> {
        let m = e.len();
        if !v.start.is_multiple_of(2) || !m.is_multiple_of(2) {
            return Err(Error::InvalidArgument("periodicity pairs split across chunks".into()));
        }
        let rho = self.end.rho;
        let mut adj = FieldEval::zeros(m, ChannelSet::new(&[Channel::X, Channel::T, Channel::TT]));
        for k in 0..m / 2 {
            let (a, b) = (2 * k, 2 * k + 1);
            let (r, area) = self.pc_coef[(v.start + a) / 2];
            let du = e.velocity(a, area) - e.velocity(b, area);
            let dp = e.pressure(a, r, area, rho) - e.pressure(b, r, area, rho);
            let dtt = e.phi_tt[a] - e.phi_tt[b];
            acc[0] += du * du;
            acc[1] += dp * dp;
            acc[2] += dtt * dtt;
            let (gu, gp, gtt) = (s[0] * du, s[1] * dp, s[2] * dtt);
            for (idx, sign) in [(a, 1.0), (b, -1.0)] {
                adj.phi_x[idx] = -sign * area * gu;
                adj.phi[idx] = sign * r * area * gp;
                adj.phi_t[idx] = sign * rho * gp;
                adj.phi_tt[idx] = sign * gtt;
            }
        }
        Ok(adj)
    }

    fn obs_chunk(
        &self,
        v: ChunkView<'_>,
        e: &FieldEval,
        s: [f64; 2],
        rad: Option<[f64; 2]>,
        acc: &mut [f64; 2],
        grad_rad: &mut [f64; 2],
    ) -> FieldEval {
        let m = e.len();
        let EndCoefficients { r, area, rho, impedance } = self.end;
        let channels =
            if self.radiation { ChannelSet::new(&[Channel::TT, Channel::XT]) } else { ChannelSet::new(&[Channel::T]) };
        let mut adj = FieldEval::zeros(m, channels);
        for j in 0..m {
            let p = e.pressure(j, r, area, rho);
            let d = p - self.obs_p[v.start + j];
            acc[0] += d * d;
            adj.phi[j] = r * area * s[0] * d;
            adj.phi_t[j] = rho * s[0] * d;
            if let Some([alpha, beta]) = rad {
                let pt = e.pressure_t(j, r, area, rho);
                let res = impedance * e.velocity_t(j, area) - alpha * p - beta * pt;
                acc[1] += res * res;
                let g = s[1] * res;
                grad_rad[0] -= g * p;
                grad_rad[1] -= g * pt;
                adj.phi_xt[j] = -impedance * area * g;
                adj.phi[j] -= alpha * r * area * g;
                adj.phi_t[j] -= (alpha * rho + beta * r * area) * g;
                adj.phi_tt[j] = -beta * rho * g;
            }
        }
        adj
    }
}

/// Run one loss family in value-only or gradient mode. Point contributions
/// are accumulated in the same order either way, so both modes give the
/// same loss bits.
fn run<F>(
    arch: &Architecture,
    w: &[f64],
    batch: &Batch,
    grad: Option<&mut [f64]>,
    name: &str,
    mut chunk: F,
) -> Result<()>
where
    F: FnMut(ChunkView<'_>, &FieldEval) -> Result<FieldEval>,
{
    match grad {
        Some(g) => {
            evaluate_with_gradient(arch, w, batch, &mut chunk, g)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { location: format!("gradient of {name}") });
            }
        }
        None => {
            let e = evaluate(arch, w, batch)?;
            chunk(ChunkView { start: 0, x: batch.x(), t: batch.t() }, &e)?;
        }
    }
    Ok(())
}
