//! Estimation of the radiation coefficients `(α, β)`.
//!
//! TOM fits `(ρc/A) u_t = α p + β p_t` by box-constrained linear least
//! squares on open-end signals; TOMB does the same on reference solver
//! signals. FTM fine-tunes a trained network while `α`, `β` are trained
//! alongside through a radiation-residual loss term.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::{Channel, ChannelSet, FieldModel, NetworkParams};
use crate::fdm::{BoundarySignals, FdmSolution};
use crate::training::{lr_decay_with, periodic_times, AdamState, LbfgsConfig, LbfgsState, LossContext, LossWeights};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Ftm,
    Tom,
    Tomb,
}

/// Estimated coefficients, with errors relative to ground truth when known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub method: Method,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    /// Euclidean norm of the radiation residual (TOM/TOMB) or the final
    /// total loss (FTM).
    pub residual: f64,
    pub trace_csv_path: Option<String>,
    pub gt: Option<[f64; 2]>,
    pub rel_errors: Option<[f64; 2]>,
}

impl EstimationResult {
    pub fn with_ground_truth(mut self, alpha: f64, beta: f64) -> Self {
        self.gt = Some([alpha, beta]);
        self.rel_errors =
            Some([(self.alpha_hat - alpha).abs() / alpha.abs(), (self.beta_hat - beta).abs() / beta.abs()]);
        self
    }
}

/// Open-end signals and the search box for `(α, β)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TomProblem {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub p_t: Vec<f64>,
    pub u_t: Vec<f64>,
    /// `ρ c / A` at the open end.
    pub scale: f64,
    /// `[[α_lo, α_hi], [β_lo, β_hi]]`.
    pub bounds: [[f64; 2]; 2],
}

/// Default box for both coefficients.
pub const DEFAULT_BOUNDS: [[f64; 2]; 2] = [[0.0, 5.0], [0.0, 5.0]];

impl TomProblem {
    pub fn from_signals(s: &BoundarySignals, bounds: [[f64; 2]; 2]) -> Self {
        Self {
            times: s.times.clone(),
            p: s.p.clone(),
            p_t: s.p_t.clone(),
            u_t: s.u_t.clone(),
            scale: s.impedance,
            bounds,
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if n == 0 || self.p.len() != n || self.p_t.len() != n || self.u_t.len() != n {
            return Err(Error::InvalidArgument("signals must share one nonempty time base".into()));
        }
        if self.bounds.iter().any(|b| !(b[0] <= b[1])) {
            return Err(Error::InvalidArgument("bounds must satisfy lower <= upper".into()));
        }
        Ok(())
    }
}

/// Sufficient statistics of the 2-parameter least-squares problem.
struct Normal {
    pp: f64,
    pq: f64,
    qq: f64,
    pb: f64,
    qb: f64,
    bb: f64,
}

impl Normal {
    fn objective(&self, a: f64, b: f64) -> f64 {
        self.bb - 2.0 * (a * self.pb + b * self.qb) + a * a * self.pp + 2.0 * a * b * self.pq + b * b * self.qq
    }
}

/// Box-constrained linear least squares for `(α, β)`. The objective is a
/// convex quadratic, so the minimizer is the best of the unconstrained
/// solution (if feasible), the one-dimensional minimizers on each of the
/// four edges, and the corners.
pub fn tom_fit(problem: &TomProblem) -> Result<EstimationResult> {
    problem.validate()?;
    let mut ne = Normal { pp: 0.0, pq: 0.0, qq: 0.0, pb: 0.0, qb: 0.0, bb: 0.0 };
    for i in 0..problem.times.len() {
        let (p, q, b) = (problem.p[i], problem.p_t[i], problem.scale * problem.u_t[i]);
        ne.pp += p * p;
        ne.pq += p * q;
        ne.qq += q * q;
        ne.pb += p * b;
        ne.qb += q * b;
        ne.bb += b * b;
    }
    let det = ne.pp * ne.qq - ne.pq * ne.pq;
    if !(det > 1e-12 * ne.pp * ne.qq) {
        return Err(Error::Degenerate("p and p_t are linearly dependent".into()));
    }
    let [[a_lo, a_hi], [b_lo, b_hi]] = problem.bounds;
    let mut candidates = Vec::with_capacity(9);
    let a0 = (ne.qq * ne.pb - ne.pq * ne.qb) / det;
    let b0 = (ne.pp * ne.qb - ne.pq * ne.pb) / det;
    if (a_lo..=a_hi).contains(&a0) && (b_lo..=b_hi).contains(&b0) {
        candidates.push((a0, b0));
    }
    for b in [b_lo, b_hi] {
        candidates.push((((ne.pb - b * ne.pq) / ne.pp).clamp(a_lo, a_hi), b));
    }
    for a in [a_lo, a_hi] {
        candidates.push((a, ((ne.qb - a * ne.pq) / ne.qq).clamp(b_lo, b_hi)));
    }
    let (alpha, beta) = candidates
        .into_iter()
        .min_by(|x, y| ne.objective(x.0, x.1).total_cmp(&ne.objective(y.0, y.1)))
        .expect("nonempty");
    let residual = (0..problem.times.len())
        .map(|i| (problem.scale * problem.u_t[i] - alpha * problem.p[i] - beta * problem.p_t[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(EstimationResult {
        method: Method::Tom,
        alpha_hat: alpha,
        beta_hat: beta,
        residual,
        trace_csv_path: None,
        gt: None,
        rel_errors: None,
    })
}

/// TOM on the reference solver's native open-end signals.
pub fn tomb_fit(fdm: &FdmSolution) -> Result<EstimationResult> {
    let problem = TomProblem::from_signals(&fdm.native_boundary_signals(), DEFAULT_BOUNDS);
    Ok(EstimationResult { method: Method::Tomb, ..tom_fit(&problem)? })
}

/// Open-end coefficients needed to turn potential derivatives into signals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpenEnd {
    pub length: f64,
    pub period: f64,
    /// Viscous coefficient `R` at `x = L`.
    pub r: f64,
    pub area: f64,
    pub rho: f64,
    pub c: f64,
}

/// `p̂`, `p̂_t`, `û_t` at `x = L` on `n_times` uniform times in `[0, T)`,
/// from exact derivatives of the model.
pub fn tom_collect_signals(model: &dyn FieldModel, end: &OpenEnd, n_times: usize) -> Result<TomProblem> {
    let times = periodic_times(end.period, n_times);
    let x = vec![end.length; n_times];
    let e = model.eval_points(&x, &times, ChannelSet::new(&[Channel::TT, Channel::XT]))?;
    Ok(TomProblem {
        p: (0..n_times).map(|i| e.pressure(i, end.r, end.area, end.rho)).collect(),
        p_t: (0..n_times).map(|i| e.pressure_t(i, end.r, end.area, end.rho)).collect(),
        u_t: (0..n_times).map(|i| e.velocity_t(i, end.area)).collect(),
        times,
        scale: end.rho * end.c / end.area,
        bounds: DEFAULT_BOUNDS,
    })
}

/// Fine-tuning schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtmConfig {
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
    pub lr_net: f64,
    pub lr_rad: f64,
    pub lr_decay: f64,
    pub alpha0: f64,
    pub beta0: f64,
    /// Update the network weights during the Adam phase.
    pub train_net: bool,
    /// Update `(α, β)` during the Adam phase.
    pub train_rad: bool,
    /// `|α|` or `|β|` beyond this triggers a divergence warning.
    pub divergence_bound: f64,
    pub log_every: usize,
    pub lbfgs: LbfgsConfig,
}

impl Default for FtmConfig {
    fn default() -> Self {
        Self {
            adam_epochs: 20_000,
            lbfgs_epochs: 1500,
            lr_net: 1e-4,
            lr_rad: 1e-2,
            lr_decay: 0.007,
            alpha0: 1.0,
            beta0: 1.0,
            train_net: true,
            train_rad: true,
            divergence_bound: 10.0,
            log_every: 100,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// `(α, β)` and the loss entering each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtmTraceRow {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub total_loss: f64,
}

pub fn write_trace_csv(rows: &[FtmTraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of fine-tuning.
pub struct FtmOutcome {
    pub params: NetworkParams,
    pub result: EstimationResult,
    pub trace: Vec<FtmTraceRow>,
}

/// Fine-tune `gamma` with `(α, β)` as extra trainables. `ctx` must be built
/// with radiation channels. Two Adam optimizers with separate learning
/// rates run first; a joint L-BFGS phase over weights and coefficients
/// follows. The trace holds one row per epoch plus a final row.
pub fn ftm_train(
    gamma: &NetworkParams,
    ctx: &LossContext,
    weights: &LossWeights,
    cfg: &FtmConfig,
) -> Result<FtmOutcome> {
    weights.validate()?;
    let arch = gamma.arch.clone();
    let n = gamma.n_trainable();
    let mut w = gamma.weights.clone();
    let mut rad = [cfg.alpha0, cfg.beta0];
    let mut adam_net = AdamState::new(n);
    let mut adam_rad = AdamState::new(2);
    let mut trace = Vec::with_capacity(cfg.adam_epochs + cfg.lbfgs_epochs + 1);
    let mut grad = vec![0.0; n];
    let mut warned = false;
    let mut check_bounds = |rad: [f64; 2], epoch: usize| {
        if !warned && rad.iter().any(|v| v.abs() > cfg.divergence_bound) {
            log::warn!("radiation coefficients left [-{0}, {0}] at epoch {epoch}: {rad:?}", cfg.divergence_bound);
            warned = true;
        }
    };
    let diverged = |epoch: usize| {
        move |e: Error| match e {
            Error::NonFinite { .. } => Error::TrainingDiverged { epoch, checkpoint: "none (see FTM trace)".into() },
            other => other,
        }
    };
    for epoch in 0..cfg.adam_epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let ev = ctx.evaluate(&arch, &w, weights, Some(rad), Some(&mut grad)).map_err(diverged(epoch))?;
        trace.push(FtmTraceRow { epoch, alpha: rad[0], beta: rad[1], total_loss: ev.total });
        if cfg.train_net {
            adam_net.step(&mut w, &grad, lr_decay_with(epoch, cfg.lr_net, cfg.lr_decay));
        }
        if cfg.train_rad {
            adam_rad.step(&mut rad, &ev.grad_rad, lr_decay_with(epoch, cfg.lr_rad, cfg.lr_decay));
        }
        check_bounds(rad, epoch);
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            log::info!("ftm epoch {epoch} loss {:.6e} alpha {:.5} beta {:.5}", ev.total, rad[0], rad[1]);
        }
    }
    let mut joint: Vec<f64> = w.iter().copied().chain(rad).collect();
    let mut lbfgs = LbfgsState::default();
    for k in 0..cfg.lbfgs_epochs {
        let epoch = cfg.adam_epochs + k;
        let mut first = None;
        lbfgs
            .epoch(&cfg.lbfgs, &mut joint, |x, g| {
                let (wx, r) = x.split_at(n);
                let (gw, gr) = g.split_at_mut(n);
                gw.iter_mut().for_each(|v| *v = 0.0);
                let ev = ctx.evaluate(&arch, wx, weights, Some([r[0], r[1]]), Some(gw))?;
                gr.copy_from_slice(&ev.grad_rad);
                first.get_or_insert(ev.total);
                Ok(ev.total)
            })
            .map_err(diverged(epoch))?;
        trace.push(FtmTraceRow { epoch, alpha: joint[n], beta: joint[n + 1], total_loss: first.expect("evaluated") });
        check_bounds([joint[n], joint[n + 1]], epoch);
    }
    w.copy_from_slice(&joint[..n]);
    rad = [joint[n], joint[n + 1]];
    let last = cfg.adam_epochs + cfg.lbfgs_epochs;
    let ev = ctx.evaluate(&arch, &w, weights, Some(rad), None).map_err(diverged(last))?;
    trace.push(FtmTraceRow { epoch: last, alpha: rad[0], beta: rad[1], total_loss: ev.total });
    Ok(FtmOutcome {
        params: gamma.with_weights(w),
        result: EstimationResult {
            method: Method::Ftm,
            alpha_hat: rad[0],
            beta_hat: rad[1],
            residual: ev.total,
            trace_csv_path: None,
            gt: None,
            rel_errors: None,
        },
        trace,
    })
}

/// Mean of `(α, β)` over the last `window` trace rows.
pub fn trailing_average(trace: &[FtmTraceRow], window: usize) -> Option<[f64; 2]> {
    let k = window.min(trace.len());
    if k == 0 {
        return None;
    }
    let tail = &trace[trace.len() - k..];
    let a = tail.iter().map(|r| r.alpha).sum::<f64>() / k as f64;
    let b = tail.iter().map(|r| r.beta).sum::<f64>() / k as f64;
    Some([a, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::FieldEval;

    fn synthetic(alpha: f64, beta: f64, n: usize) -> TomProblem {
        let w = 2.0 * std::f64::consts::PI * 261.6;
        let times: Vec<f64> = (0..n).map(|k| k as f64 / (n as f64 * 261.6)).collect();
        let p: Vec<f64> = times.iter().map(|t| 100.0 * (w * t).sin() + 30.0 * (3.0 * w * t).cos()).collect();
        let p_t: Vec<f64> = times.iter().map(|t| 100.0 * w * (w * t).cos() - 90.0 * w * (3.0 * w * t).sin()).collect();
        let scale = 1.2 * 343.0 / 1.2566e-3;
        let u_t = (0..n).map(|i| (alpha * p[i] + beta * p_t[i]) / scale).collect();
        TomProblem { times, p, p_t, u_t, scale, bounds: DEFAULT_BOUNDS }
    }

    #[test]
    fn recovers_interior_coefficients() {
        let r = tom_fit(&synthetic(1.2142, 0.7371, 500)).unwrap();
        assert!((r.alpha_hat - 1.2142).abs() < 1e-10, "{}", r.alpha_hat);
        assert!((r.beta_hat - 0.7371).abs() < 1e-10);
    }

    #[test]
    fn residual_orthogonal_to_design() {
        let mut pr = synthetic(1.0, 0.5, 400);
        for (i, v) in pr.u_t.iter_mut().enumerate() {
            *v += 1e-3 * ((i * 7919) % 13) as f64;
        }
        let r = tom_fit(&pr).unwrap();
        let res: Vec<f64> = (0..pr.times.len())
            .map(|i| pr.scale * pr.u_t[i] - r.alpha_hat * pr.p[i] - r.beta_hat * pr.p_t[i])
            .collect();
        for col in [&pr.p, &pr.p_t] {
            let d: f64 = res.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            let scale = res.iter().map(|v| v * v).sum::<f64>().sqrt() * col.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(d.abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn scale_equivariance() {
        let pr = synthetic(2.0, 1.0, 300);
        let k = -3.7;
        let scaled = TomProblem {
            p: pr.p.iter().map(|v| k * v).collect(),
            p_t: pr.p_t.iter().map(|v| k * v).collect(),
            u_t: pr.u_t.iter().map(|v| k * v).collect(),
            ..pr.clone()
        };
        let (a, b) = (tom_fit(&pr).unwrap(), tom_fit(&scaled).unwrap());
        assert!((a.alpha_hat - b.alpha_hat).abs() < 1e-9);
        assert!((a.beta_hat - b.beta_hat).abs() < 1e-12);
    }

    #[test]
    fn negative_alpha_collapses_to_bound() {
        let r = tom_fit(&synthetic(-0.8, 0.74, 300)).unwrap();
        assert!(r.alpha_hat.abs() <= 1e-10);
        assert!((r.beta_hat - 0.74).abs() / 0.74 < 0.05);
    }

    #[test]
    fn zero_right_side_gives_zero() {
        let r = tom_fit(&synthetic(0.0, 0.0, 100)).unwrap();
        assert_eq!((r.alpha_hat, r.beta_hat), (0.0, 0.0));
    }

    #[test]
    fn outputs_stay_in_box() {
        for (a, b) in [(7.0, 0.5), (1.0, 9.0), (-2.0, -2.0), (6.0, 6.0)] {
            let r = tom_fit(&synthetic(a, b, 200)).unwrap();
            assert!((0.0..=5.0).contains(&r.alpha_hat) && (0.0..=5.0).contains(&r.beta_hat));
        }
    }

    #[test]
    fn degenerate_design_rejected() {
        let mut pr = synthetic(1.0, 1.0, 50);
        pr.p_t = pr.p.iter().map(|v| 2.0 * v).collect();
        assert!(matches!(tom_fit(&pr), Err(Error::Degenerate(_))));
    }

    struct Bilinear;
    impl FieldModel for Bilinear {
        fn eval_points(&self, x: &[f64], t: &[f64], _: ChannelSet) -> Result<FieldEval> {
            let n = x.len();
            Ok(FieldEval {
                phi: (0..n).map(|i| x[i] * t[i]).collect(),
                phi_x: t.to_vec(),
                phi_t: x.to_vec(),
                phi_xx: vec![0.0; n],
                phi_tt: vec![0.0; n],
                phi_xt: vec![1.0; n],
            })
        }
    }

    #[test]
    fn bilinear_stub_signals() {
        let end = OpenEnd { length: 1.0, period: 0.01, r: 0.0, area: 2.0, rho: 1.2, c: 343.0 };
        let pr = tom_collect_signals(&Bilinear, &end, 10).unwrap();
        assert!(pr.u_t.iter().all(|&v| v == -2.0));
        assert!(pr.p.iter().all(|&v| v == 1.2));
        assert!(pr.p_t.iter().all(|&v| v == 0.0));
    }
}
