//! Command-line entry point.
//!
//! Exit status is 0 on success, 2 on usage errors (bad flags, missing or
//! malformed config, unknown override keys) and 1 when a stage fails.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::harness::{calibrate_xi, Experiment, ExperimentConfig};
use crate::Error;

/// Every config key with its unit and meaning, in dotted form.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("name", "run directory prefix"),
    ("geometry.length", "tube length (m)"),
    ("geometry.profile.kind", "radius profile: uniform | conical | sampled"),
    ("geometry.profile.radius", "radius of a uniform tube (m)"),
    ("air.rho", "air density (kg/m^3)"),
    ("air.c", "speed of sound (m/s)"),
    ("air.mu", "dynamic viscosity (Pa s)"),
    ("air.eta", "adiabatic constant (-)"),
    ("air.lambda_th", "heat conduction coefficient (W/(m K))"),
    ("air.cp", "specific heat at constant pressure (J/(kg K))"),
    ("air.omega_c", "angular frequency of the loss model (rad/s); null uses 2 pi f"),
    ("source.frequency", "fundamental frequency f (Hz); the period is 1/f"),
    ("source.u0", "peak glottal volume velocity (m^3/s)"),
    ("source.tp_frac", "opening phase as a fraction of the period (-)"),
    ("source.tn_frac", "closing phase as a fraction of the period (-)"),
    ("source.smooth_width", "Gaussian smoothing width (s); null uses T/200"),
    ("radiation.delta", "end-correction coefficient of the radiation impedance (-)"),
    ("radiation.beta_c", "resistance coefficient of the radiation impedance (-)"),
    ("fdm.nx", "reference solver grid nodes"),
    ("fdm.courant", "Courant number c dt/dx (-)"),
    ("fdm.max_periods", "periods marched before giving up on a steady state"),
    ("fdm.steady_tol", "relative period-to-period difference accepted as steady"),
    ("fdm.corrector_tol", "radiation corrector tolerance (relative)"),
    ("fdm.corrector_max_iter", "radiation corrector iterations per step"),
    ("network.n_f", "hidden width"),
    ("network.n_b", "residual blocks"),
    ("network.fc_per_block", "FC + activation pairs per residual block"),
    ("network.ffe_sigma", "standard deviation of Fourier-feature frequencies (-)"),
    ("network.ffe_size", "Fourier frequencies per input coordinate"),
    ("network.xi", "output scale (m^3/s); null calibrates from a coarse solver run"),
    ("network.snake_a", "Snake activation frequency (-)"),
    ("network.seed", "seed of the weight and frequency draws"),
    ("network.activation", "hidden activation: snake | identity"),
    ("weights.pde", "weight of the PDE residual loss"),
    ("weights.bc", "weight of the source boundary loss"),
    ("weights.obs", "weight of the observation loss"),
    ("weights.pc", "weight of the periodicity losses"),
    ("weights.pc_u", "periodicity weight on volume velocity"),
    ("weights.pc_p", "periodicity weight on pressure"),
    ("weights.pc_phi_tt", "periodicity weight on the second time derivative"),
    ("weights.rad", "weight of the radiation residual during coefficient estimation"),
    ("damping", "sign convention of the PDE damping term: consistent | literal"),
    ("collocation.n_pde", "Sobol points for the PDE residual"),
    ("collocation.n_bc", "source-end times"),
    ("collocation.n_pc", "positions for the periodicity losses"),
    ("collocation.n_obs", "observation times at the open end"),
    ("collocation.sobol_skip", "index of the first Sobol point"),
    ("training.adam_epochs", "Adam epochs"),
    ("training.lbfgs_epochs", "L-BFGS epochs after Adam"),
    ("training.lr_init", "initial Adam learning rate"),
    ("training.lr_decay", "rate in lr_init / (1 + rate epoch)"),
    ("training.checkpoint_every", "epochs between checkpoints; 0 disables them"),
    ("training.log_every", "epochs between progress log lines"),
    ("training.lbfgs.history", "L-BFGS curvature pairs kept"),
    ("training.lbfgs.max_iter", "L-BFGS iterations per epoch"),
    ("training.lbfgs.max_line_search", "backtracking trials per iteration"),
    ("training.lbfgs.c1", "sufficient-decrease constant"),
    ("training.lbfgs.backtrack", "step shrink factor per trial"),
    ("training.lbfgs.tol_grad", "epoch stops when max |g| falls below this"),
    ("training.lbfgs.tol_change", "epoch stops on steps or relative loss changes below this"),
    ("ftm.adam_epochs", "Adam epochs of the fine-tuning"),
    ("ftm.lbfgs_epochs", "joint L-BFGS epochs of the fine-tuning"),
    ("ftm.lr_net", "initial learning rate of the network weights"),
    ("ftm.lr_rad", "initial learning rate of alpha and beta"),
    ("ftm.lr_decay", "rate in lr / (1 + rate epoch)"),
    ("ftm.alpha0", "initial alpha (-)"),
    ("ftm.beta0", "initial beta (s)"),
    ("ftm.train_net", "update the network during the Adam phase"),
    ("ftm.train_rad", "update alpha and beta during the Adam phase"),
    ("ftm.divergence_bound", "|alpha| or |beta| beyond this is reported as divergence"),
    ("ftm.log_every", "epochs between progress log lines"),
    ("ftm.lbfgs.history", "L-BFGS curvature pairs kept"),
    ("ftm.lbfgs.max_iter", "L-BFGS iterations per epoch"),
    ("ftm.lbfgs.max_line_search", "backtracking trials per iteration"),
    ("ftm.lbfgs.c1", "sufficient-decrease constant"),
    ("ftm.lbfgs.backtrack", "step shrink factor per trial"),
    ("ftm.lbfgs.tol_grad", "epoch stops when max |g| falls below this"),
    ("ftm.lbfgs.tol_change", "epoch stops on steps or relative loss changes below this"),
    ("noise.snr_db", "signal-to-noise ratio of the observations (dB)"),
    ("noise.seed", "seed of the observation noise"),
    ("evaluation.nx_out", "evaluation grid points in space"),
    ("evaluation.nt_out", "evaluation grid points in time, both period ends included"),
    ("evaluation.tom_times", "open-end times for TOM and the boundary comparison"),
    ("evaluation.field_csv_stride", "keep every n-th grid line in field CSVs"),
    ("evaluation.block_times", "time rows per network evaluation batch"),
];

#[derive(Parser, Debug)]
#[command(name = "tubefield", version, about = "Acoustic field reconstruction in a lossy tube")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// Print every config key with its default and description as JSON.
    #[arg(long)]
    pub print_schema: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Reference solution; writes fdm/.
    Forward(Common),
    /// Noisy open-end observations; writes obs/.
    SynthObs(Common),
    /// Train the field estimator; writes gamma/.
    Train(Common),
    /// Fine-tune with trainable radiation coefficients; writes inverse/ftm*.
    Ftm(Common),
    /// Least-squares coefficient fits on the estimator and the reference; writes inverse/tom*.json.
    Tom(Common),
    /// Field error and open-end signal comparison; writes eval/.
    Evaluate(Common),
    /// Every stage in order, then table2.json.
    RunAll(Common),
    /// Print the output scale obtained from a coarse reference run.
    CalibrateXi(Common),
}

#[derive(Args, Debug, Clone)]
#[command(after_long_help = key_help())]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. training.adam_epochs=100. Values parse as JSON, else as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run directory. Defaults to <root>/<name>-<hash>, root from TUBEFIELD_OUT or ./runs.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for both the network and the noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue training from a saved state in the run directory; with
    /// run-all, also skip stages the manifest records as completed.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, short, conflicts_with = "verbose")]
    pub quiet: bool,
    #[arg(long, short)]
    pub verbose: bool,
}

fn key_help() -> String {
    let defaults = flatten_defaults();
    let mut s = String::from("Config keys (default in brackets):\n");
    for (k, doc) in CONFIG_KEYS {
        let d = defaults.iter().find(|(name, _)| name == k).map(|(_, v)| v.to_string()).unwrap_or_default();
        s.push_str(&format!("  {k:<34} {doc} [{d}]\n"));
    }
    s
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn flatten_defaults() -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten("", &serde_json::to_value(ExperimentConfig::default()).expect("serializes"), &mut out);
    out
}

/// Keys of `root`, including intermediate objects.
fn all_paths(prefix: &str, v: &Value, out: &mut Vec<String>) {
    if let Value::Object(m) = v {
        for (k, x) in m {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.push(key.clone());
            all_paths(&key, x, out);
        }
    }
}

/// Usage-level failure: printed and mapped to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

/// Apply `key=value` overrides to a config. Unknown keys are rejected with
/// the closest valid keys.
pub fn apply_overrides(config: ExperimentConfig, overrides: &[String]) -> Result<ExperimentConfig, UsageError> {
    let mut root = serde_json::to_value(&config).expect("config serializes");
    for item in overrides {
        let (key, raw) =
            item.split_once('=').ok_or_else(|| UsageError(format!("override `{item}` is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut paths = Vec::new();
        all_paths("", &root, &mut paths);
        if !paths.iter().any(|p| p == key) {
            paths.sort_by(|a, b| {
                let da = strsim::levenshtein(a, key);
                let db = strsim::levenshtein(b, key);
                da.cmp(&db).then(a.cmp(b))
            });
            let near: Vec<&str> = paths.iter().take(3).map(String::as_str).collect();
            return Err(UsageError(format!("unknown config key `{key}`; nearest: {}", near.join(", "))));
        }
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot.get_mut(part).expect("path checked");
        }
        *slot = value;
    }
    serde_json::from_value(root).map_err(|e| UsageError(format!("invalid override: {e}")))
}

fn load_config(c: &Common) -> Result<ExperimentConfig, UsageError> {
    let path = c.config.as_ref().ok_or_else(|| UsageError("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::from_json_file(path).map_err(|e| UsageError(e.to_string()))?;
    if let Some(seed) = c.seed {
        cfg.network.seed = seed;
        cfg.noise.seed = seed;
    }
    let cfg = apply_overrides(cfg, &c.overrides)?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn run_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    match &c.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os("TUBEFIELD_OUT").map(PathBuf::from).unwrap_or_else(|| "runs".into());
            cfg.run_dir(&root)
        }
    }
}

fn init_logging(c: &Common) {
    let level = if c.quiet {
        log::LevelFilter::Warn
    } else if c.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp_secs().try_init();
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn dispatch(command: Command) -> Result<(), Result<UsageError, Error>> {
    let common = match &command {
        Command::Forward(c)
        | Command::SynthObs(c)
        | Command::Train(c)
        | Command::Ftm(c)
        | Command::Tom(c)
        | Command::Evaluate(c)
        | Command::RunAll(c)
        | Command::CalibrateXi(c) => c.clone(),
    };
    init_logging(&common);
    let cfg = load_config(&common).map_err(Ok)?;
    if let Command::CalibrateXi(_) = command {
        let xi = calibrate_xi(&cfg).map_err(|e| Err(e.in_stage("calibrate-xi")))?;
        println!("{xi:e}");
        return Ok(());
    }
    let dir = run_dir(&common, &cfg);
    let mut exp = Experiment::open(cfg, dir).map_err(Err)?;
    exp.resume = common.resume;
    let result: crate::Result<()> = (|| {
        match command {
            Command::Forward(_) => exp.forward()?,
            Command::SynthObs(_) => {
                let obs = exp.synth_obs()?;
                println!("realized SNR {:.4} dB", obs.snr_db);
            }
            Command::Train(_) => print_json(&exp.train()?.summary()),
            Command::Evaluate(_) => {
                let r = exp.evaluate()?;
                println!("rel L2 {:.6e}  max |error| {:.6e} Pa", r.rel_l2, r.max_abs);
            }
            Command::Ftm(_) => {
                print_json(&exp.ftm()?);
                exp.table2()?;
            }
            Command::Tom(_) => {
                print_json(&exp.tomb()?);
                print_json(&exp.tom()?);
                exp.table2()?;
            }
            Command::RunAll(_) if exp.resume => print_json(&exp.run_pending()?),
            Command::RunAll(_) => print_json(&exp.run_all()?),
            Command::CalibrateXi(_) => unreachable!(),
        }
        Ok(())
    })();
    result.map_err(Err)?;
    eprintln!("outputs in {}", exp.dir.display());
    Ok(())
}

/// Parse `argv` (program name first), run, and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if cli.print_schema {
        let defaults = flatten_defaults();
        let schema: serde_json::Map<String, Value> = CONFIG_KEYS
            .iter()
            .map(|(k, doc)| {
                let d = defaults.iter().find(|(name, _)| name == k).map(|(_, v)| v.clone()).unwrap_or(Value::Null);
                (k.to_string(), serde_json::json!({ "default": d, "description": doc }))
            })
            .collect();
        print_json(&schema);
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required\n\n{}", <Cli as clap::CommandFactory>::command().render_usage());
        return 2;
    };
    match dispatch(command) {
        Ok(()) => 0,
        Err(Ok(UsageError(msg))) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Err(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_table_covers_every_leaf() {
        let mut leaves: Vec<String> = flatten_defaults().into_iter().map(|(k, _)| k).collect();
        let mut documented: Vec<String> = CONFIG_KEYS.iter().map(|(k, _)| k.to_string()).collect();
        leaves.sort();
        documented.sort();
        assert_eq!(leaves, documented);
    }

    #[test]
    fn overrides_parse_values() {
        let cfg = apply_overrides(
            ExperimentConfig::default(),
            &["training.adam_epochs=100".into(), "network.xi=null".into(), "name=desk".into()],
        )
        .unwrap();
        assert_eq!(cfg.training.adam_epochs, 100);
        assert_eq!(cfg.network.xi, None);
        assert_eq!(cfg.name, "desk");
        let cfg = apply_overrides(
            ExperimentConfig::default(),
            &[r#"geometry.profile={"kind":"conical","inlet":0.01,"outlet":0.03}"#.into()],
        )
        .unwrap();
        assert!(matches!(cfg.geometry.profile, crate::physics::RadiusProfile::Conical { .. }));
    }

    #[test]
    fn unknown_override_lists_nearest() {
        let err = apply_overrides(ExperimentConfig::default(), &["training.adam_epoch=5".into()]).unwrap_err();
        assert!(err.0.contains("training.adam_epochs"), "{}", err.0);
        let err = apply_overrides(ExperimentConfig::default(), &["noise".into()]).unwrap_err();
        assert!(err.0.contains("KEY=VALUE"));
        let err = apply_overrides(ExperimentConfig::default(), &["training.adam_epochs=-1".into()]).unwrap_err();
        assert!(err.0.contains("invalid"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["tubefield", "frobnicate"]), 2);
        assert_eq!(run(["tubefield", "forward"]), 2);
        assert_eq!(run(["tubefield", "forward", "--config", "/nonexistent.json"]), 2);
        assert_eq!(run(["tubefield", "--help"]), 0);
        assert_eq!(run(["tubefield", "--print-schema"]), 0);
    }
}
