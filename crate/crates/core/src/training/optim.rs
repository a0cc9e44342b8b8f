//! Adam, the learning-rate schedule, and L-BFGS.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `lr_init / (1 + rate·epoch)`; the schedule uses `rate = 0.007`.
pub fn lr_decay(epoch: usize, lr_init: f64) -> f64 {
    lr_decay_with(epoch, lr_init, 0.007)
}

pub fn lr_decay_with(epoch: usize, lr_init: f64, rate: f64) -> f64 {
    lr_init / (1.0 + rate * epoch as f64)
}

/// Adam with bias correction; `eps` is added after the square root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbfgsConfig {
    pub history: usize,
    /// Inner iterations per epoch.
    pub max_iter: usize,
    pub max_line_search: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    pub backtrack: f64,
    /// Stop an epoch when `max |g|` falls below this.
    pub tol_grad: f64,
    /// Stop an epoch when the largest step component or the loss change
    /// relative to the loss falls below this.
    pub tol_change: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            history: 10,
            max_iter: 20,
            max_line_search: 20,
            c1: 1e-4,
            backtrack: 0.5,
            tol_grad: 1e-12,
            tol_change: 1e-15,
        }
    }
}

/// Curvature history carried across epochs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LbfgsState {
    pub s: VecDeque<Vec<f64>>,
    pub y: VecDeque<Vec<f64>>,
    pub iterations: u64,
}

/// Outcome of one L-BFGS epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsEpoch {
    pub loss: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

impl LbfgsState {
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        let rho: Vec<f64> = (0..k).map(|i| 1.0 / dot(&self.y[i], &self.s[i])).collect();
        for i in (0..k).rev() {
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            q.iter_mut().zip(&self.y[i]).for_each(|(qj, yj)| *qj -= alpha[i] * yj);
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let b = rho[i] * dot(&self.y[i], &q);
            q.iter_mut().zip(&self.s[i]).for_each(|(qj, sj)| *qj += (alpha[i] - b) * sj);
        }
        q
    }

    /// One epoch of up to `max_iter` iterations. `f(x, grad)` returns the
    /// loss and writes the gradient. Accepted steps never increase the loss;
    /// a failed line search ends the epoch with `x` unchanged since the last
    /// accepted step.
    pub fn epoch<F>(&mut self, cfg: &LbfgsConfig, x: &mut [f64], mut f: F) -> Result<LbfgsEpoch>
    where
        F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
    {
        let n = x.len();
        let mut g = vec![0.0; n];
        let mut loss = f(x, &mut g)?;
        let mut evaluations = 1;
        let mut out = LbfgsEpoch { loss, iterations: 0, evaluations, line_search_failed: false };
        if !loss.is_finite() {
            return Err(Error::NonFinite { location: "L-BFGS loss".into() });
        }
        if max_abs(&g) <= cfg.tol_grad {
            return Ok(out);
        }
        let mut trial = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        for it in 0..cfg.max_iter {
            let d = self.direction(&g);
            let gtd = dot(&g, &d);
            if gtd >= 0.0 {
                break;
            }
            let mut t =
                if self.iterations == 0 { 1.0f64.min(1.0 / g.iter().map(|v| v.abs()).sum::<f64>()) } else { 1.0 };
            let mut accepted = None;
            for _ in 0..cfg.max_line_search {
                trial.iter_mut().zip(x.iter()).zip(&d).for_each(|((tr, xi), di)| *tr = xi + t * di);
                let l = f(&trial, &mut g_new)?;
                evaluations += 1;
                if l.is_finite() && l <= loss + cfg.c1 * t * gtd {
                    accepted = Some(l);
                    break;
                }
                t *= cfg.backtrack;
            }
            out.iterations = it + 1;
            out.evaluations = evaluations;
            let Some(l_new) = accepted else {
                log::warn!("L-BFGS line search failed after {} trials; ending epoch", cfg.max_line_search);
                out.line_search_failed = true;
                break;
            };
            self.iterations += 1;
            let s: Vec<f64> = d.iter().map(|v| t * v).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 1e-10 {
                if self.s.len() == cfg.history {
                    self.s.pop_front();
                    self.y.pop_front();
                }
                self.s.push_back(s.clone());
                self.y.push_back(y);
            }
            x.copy_from_slice(&trial);
            std::mem::swap(&mut g, &mut g_new);
            let change = (l_new - loss).abs();
            loss = l_new;
            out.loss = loss;
            let small_change = change <= cfg.tol_change * loss.abs();
            if max_abs(&g) <= cfg.tol_grad || max_abs(&s) <= cfg.tol_change || small_change {
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_reference_trajectory() {
        // scalar reference run of f(w) = w^2 from w = 1 with lr = 0.1
        let reference = [
            0.9000000005,
            0.8004122286917927,
            0.70158627294603,
            0.6039390605737458,
            0.5079636592643417,
            0.4142364559936616,
            0.32342070493910174,
            0.2362637245210415,
            0.1535845600703632,
            0.07624915560691176,
        ];
        let mut s = AdamState::new(1);
        let mut w = [1.0];
        for want in reference {
            let g = [2.0 * w[0]];
            s.step(&mut w, &g, 0.1);
            assert!((w[0] - want).abs() < 1e-12, "{} {}", w[0], want);
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = AdamState::new(3);
        let mut w = [1.0, -2.0, 3.0];
        s.step(&mut w, &[0.0; 3], 0.1);
        assert_eq!(w, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_moments_stay_finite() {
        let mut s = AdamState::new(2);
        let mut w = [0.0, 0.0];
        for k in 0..10_000 {
            let g = [1e6 * (k as f64).sin(), -1e-6];
            s.step(&mut w, &g, 1e-3);
        }
        assert!(s.m.iter().chain(&s.v).chain(&w).all(|v| v.is_finite()));
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(lr_decay(0, 1e-2), 1e-2);
        assert!((lr_decay(1000, 1e-2) - 1.25e-3).abs() < 1e-18);
        assert!((1..500).all(|e| lr_decay(e, 1.0) <= lr_decay(e - 1, 1.0)));
    }

    fn quadratic(x: &[f64], g: &mut [f64]) -> Result<f64> {
        // f = sum_i k_i (x_i - i)^2 / 2 with k = 1..5, plus a coupling term
        let mut f = 0.0;
        for i in 0..x.len() {
            let k = (i + 1) as f64;
            let d = x[i] - i as f64;
            f += 0.5 * k * d * d;
            g[i] = k * d;
        }
        let c = x[0] - x[1];
        f += 0.25 * c * c;
        g[0] += 0.5 * c;
        g[1] -= 0.5 * c;
        Ok(f)
    }

    #[test]
    fn lbfgs_solves_quadratic() {
        let cfg = LbfgsConfig::default();
        let mut st = LbfgsState::default();
        let mut x = vec![3.0, -1.0, 4.0, 1.0, -5.0];
        for _ in 0..10 {
            st.epoch(&cfg, &mut x, quadratic).unwrap();
        }
        let mut g = vec![0.0; 5];
        quadratic(&x, &mut g).unwrap();
        assert!(max_abs(&g) < 1e-10, "{g:?}");
        assert!(st.s.len() <= 10);
    }

    #[test]
    fn lbfgs_at_minimum_is_stationary() {
        let cfg = LbfgsConfig::default();
        let mut st = LbfgsState::default();
        let mut x = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        // coupling term is zero only when x0 == x1, so use the decoupled minimum
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                let d = x[i] - i as f64;
                v += 0.5 * d * d;
                g[i] = d;
            }
            Ok(v)
        };
        st.epoch(&cfg, &mut x, f).unwrap();
        assert_eq!(x, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn lbfgs_accepted_steps_never_increase_loss() {
        // Rosenbrock: nonconvex, exercises backtracking
        let mut losses = Vec::new();
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        };
        let cfg = LbfgsConfig::default();
        let mut st = LbfgsState::default();
        let mut x = vec![-1.2, 1.0];
        for _ in 0..10 {
            losses.push(st.epoch(&cfg, &mut x, f).unwrap().loss);
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
    }
}
