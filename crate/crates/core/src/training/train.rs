//! Full-batch training of the field estimator: Adam with decay, then L-BFGS.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::losses::{LossContext, LossTerms, LossWeights};
use super::optim::{lr_decay_with, AdamState, LbfgsConfig, LbfgsState};
use crate::diffnet::{load_checkpoint, save_checkpoint, NetworkParams};
use crate::{Error, Result};

/// Optimizer schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
    pub lr_init: f64,
    /// Rate in `lr_init / (1 + rate·epoch)`.
    pub lr_decay: f64,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Epochs between progress log lines.
    pub log_every: usize,
    pub lbfgs: LbfgsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam_epochs: 20_000,
            lbfgs_epochs: 3000,
            lr_init: 1e-2,
            lr_decay: 0.007,
            checkpoint_every: 1000,
            log_every: 100,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Adam,
    Lbfgs,
    Final,
}

/// One line of the training log: the loss at the parameters entering
/// `epoch` (the `final` row holds the loss after the last epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub pde: f64,
    pub bc: f64,
    pub obs: f64,
    pub pc_u: f64,
    pub pc_p: f64,
    pub pc_phi_tt: f64,
    pub total: f64,
}

impl TrainLogRow {
    fn new(epoch: usize, phase: Phase, lr: f64, t: &LossTerms, total: f64) -> Self {
        Self {
            epoch,
            phase,
            lr,
            pde: t.pde,
            bc: t.bc,
            obs: t.obs,
            pc_u: t.pc_u,
            pc_p: t.pc_p,
            pc_phi_tt: t.pc_phi_tt,
            total,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<TrainLogRow>,
    pub line_search_failures: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total)
    }

    /// `log10(initial / final)`.
    pub fn orders_of_decrease(&self) -> Option<f64> {
        Some((self.initial_loss()? / self.final_loss()?).log10())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// JSON summary: epochs, first and last loss, decrease.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "epochs": self.rows.len().saturating_sub(1),
            "initial_loss": self.initial_loss(),
            "final_loss": self.final_loss(),
            "orders_of_decrease": self.orders_of_decrease(),
            "line_search_failures": self.line_search_failures,
        })
    }
}

/// Where checkpoints go and whether to pick up from one.
#[derive(Clone, Debug, Default)]
pub struct TrainControl {
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many epochs of the schedule (the run can be resumed).
    pub stop_after: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ResumeState {
    next_epoch: usize,
    adam: AdamState,
    lbfgs: LbfgsState,
    report: TrainReport,
}

const WEIGHTS_FILE: &str = "checkpoint.bin";
const STATE_FILE: &str = "train_state.json";

fn save_state(dir: &Path, params: &NetworkParams, state: &ResumeState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_checkpoint(params, &dir.join(WEIGHTS_FILE))?;
    let path = dir.join(STATE_FILE);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(state)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
}

fn load_state(dir: &Path) -> Result<(NetworkParams, ResumeState)> {
    let params = load_checkpoint(&dir.join(WEIGHTS_FILE))?;
    let path = dir.join(STATE_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let state = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CorruptCheckpoint { path: path.clone(), reason: e.to_string() })?;
    Ok((params, state))
}

/// Train `params` on `ctx`. Every epoch's loss is logged; the returned
/// parameters are those after the last epoch.
pub fn train_gamma(
    params: NetworkParams,
    ctx: &LossContext,
    weights: &LossWeights,
    cfg: &TrainConfig,
    control: &TrainControl,
) -> Result<(NetworkParams, TrainReport)> {
    weights.validate()?;
    let n = params.n_trainable();
    let total_epochs = cfg.adam_epochs + cfg.lbfgs_epochs;
    let (mut params, mut state) = match (&control.checkpoint_dir, control.resume) {
        (Some(dir), true) if dir.join(STATE_FILE).exists() => {
            let (p, s) = load_state(dir)?;
            if p.arch != params.arch || p.ffe_matrix != params.ffe_matrix {
                return Err(Error::Config("checkpoint belongs to a different network".into()));
            }
            log::info!("resuming training at epoch {}", s.next_epoch);
            (p, s)
        }
        _ => (
            params,
            ResumeState {
                next_epoch: 0,
                adam: AdamState::new(n),
                lbfgs: LbfgsState::default(),
                report: TrainReport::default(),
            },
        ),
    };
    let last_checkpoint = |dir: &Option<PathBuf>, saved: bool| match (dir, saved) {
        (Some(d), true) => d.join(WEIGHTS_FILE).display().to_string(),
        _ => "none".to_string(),
    };
    let mut saved = control.resume && state.next_epoch > 0;
    let arch = params.arch.clone();
    let mut grad = vec![0.0; n];
    let stop = control.stop_after.unwrap_or(usize::MAX);
    let mut done = 0;
    while state.next_epoch < total_epochs && done < stop {
        let epoch = state.next_epoch;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => {
                Error::TrainingDiverged { epoch, checkpoint: last_checkpoint(&control.checkpoint_dir, saved) }
            }
            other => other,
        };
        if epoch < cfg.adam_epochs {
            let lr = lr_decay_with(epoch, cfg.lr_init, cfg.lr_decay);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let ev = ctx.evaluate(&arch, &params.weights, weights, None, Some(&mut grad)).map_err(diverged)?;
            state.report.rows.push(TrainLogRow::new(epoch, Phase::Adam, lr, &ev.terms, ev.total));
            state.adam.step(&mut params.weights, &grad, lr);
        } else {
            let mut first: Option<(LossTerms, f64)> = None;
            let out = state
                .lbfgs
                .epoch(&cfg.lbfgs, &mut params.weights, |w, g| {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    let ev = ctx.evaluate(&arch, w, weights, None, Some(g))?;
                    first.get_or_insert((ev.terms, ev.total));
                    Ok(ev.total)
                })
                .map_err(diverged)?;
            let (terms, total) = first.expect("at least one evaluation");
            state.report.rows.push(TrainLogRow::new(epoch, Phase::Lbfgs, 0.0, &terms, total));
            if out.line_search_failed {
                state.report.line_search_failures += 1;
            }
        }
        if cfg.log_every > 0 && epoch % cfg.log_every == 0 {
            let r = state.report.rows.last().expect("row");
            log::info!("epoch {epoch} total {:.6e} pde {:.3e} bc {:.3e} obs {:.3e}", r.total, r.pde, r.bc, r.obs);
        }
        state.next_epoch += 1;
        done += 1;
        if let Some(dir) = &control.checkpoint_dir {
            let at_cadence = cfg.checkpoint_every > 0 && state.next_epoch % cfg.checkpoint_every == 0;
            if at_cadence || done == stop {
                save_state(dir, &params, &state)?;
                saved = true;
            }
        }
    }
    if state.next_epoch == total_epochs {
        let ev = ctx.evaluate(&arch, &params.weights, weights, None, None).map_err(|e| match e {
            Error::NonFinite { .. } => Error::TrainingDiverged {
                epoch: total_epochs,
                checkpoint: last_checkpoint(&control.checkpoint_dir, saved),
            },
            other => other,
        })?;
        state.report.rows.push(TrainLogRow::new(total_epochs, Phase::Final, 0.0, &ev.terms, ev.total));
        if let Some(dir) = &control.checkpoint_dir {
            save_checkpoint(&params, &dir.join(WEIGHTS_FILE))?;
        }
    }
    Ok((params, state.report))
}
