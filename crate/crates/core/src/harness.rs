//! Experiment orchestration: configuration, noise injection, metrics and
//! the on-disk layout of a run.
//!
//! A run directory holds
//!
//! ```text
//! config.json  manifest.json  table2.json
//! fdm/{field.csv, boundary.csv, summary.json}
//! obs/observations.csv
//! gamma/{checkpoint.bin, train_state.json, train_log.csv, summary.json}
//! eval/{field_error.json, p_field.csv, boundary.csv}
//! inverse/{ftm.json, ftm_trace.csv, ftm_checkpoint.bin, tom.json, tomb.json}
//! ```
//!
//! Every stage is deterministic given the config, so rerunning a config
//! reproduces every CSV and JSON array bitwise. Only the stage timings in
//! `manifest.json` differ between reruns.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffnet::{
    init_params, load_checkpoint, save_checkpoint, Activation, Channel, ChannelSet, FieldModel, NetworkConfig,
    NetworkParams,
};
use crate::fdm::{run_to_steady_state, FdmConfig, FdmProblem, FdmSolution};
use crate::inverse::{
    ftm_train, tom_collect_signals, tom_fit, tomb_fit, write_trace_csv, EstimationResult, FtmConfig, OpenEnd,
};
use crate::physics::{
    loss_coefficients, radiation_from_taylor, AirProperties, DampingVariant, RadiationCoefficients, RadiusProfile,
    SourceWaveform, TubeGeometry,
};
use crate::training::{
    periodic_times, train_gamma, CollocationConfig, CollocationSets, LossContext, LossWeights, ObservationData,
    PhysicsSetup, TrainConfig, TrainControl, TrainReport,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Tube length (m).
    pub length: f64,
    pub profile: RadiusProfile,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { length: 1.0, profile: RadiusProfile::Uniform { radius: 0.02 } }
    }
}

/// Air constants; `omega_c` defaults to the source's angular frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AirConfig {
    /// Density (kg/m³).
    pub rho: f64,
    /// Speed of sound (m/s).
    pub c: f64,
    /// Dynamic viscosity (Pa·s).
    pub mu: f64,
    /// Adiabatic constant.
    pub eta: f64,
    /// Heat conduction coefficient (W/(m·K)).
    pub lambda_th: f64,
    /// Specific heat at constant pressure (J/(kg·K)).
    pub cp: f64,
    /// Angular frequency of the loss model (rad/s).
    pub omega_c: Option<f64>,
}

impl Default for AirConfig {
    fn default() -> Self {
        Self { rho: 1.2, c: 343.0, mu: 1.81e-5, eta: 1.402, lambda_th: 0.0262, cp: 1005.0, omega_c: None }
    }
}

/// Glottal source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Fundamental frequency (Hz).
    pub frequency: f64,
    /// Peak volume velocity (m³/s).
    pub u0: f64,
    pub tp_frac: f64,
    pub tn_frac: f64,
    /// Gaussian smoothing width (s); defaults to `T / 200`.
    pub smooth_width: Option<f64>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { frequency: 261.6, u0: 5e-4, tp_frac: 0.4, tn_frac: 0.16, smooth_width: None }
    }
}

/// Taylor coefficients of the radiation impedance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiationConfig {
    pub delta: f64,
    pub beta_c: f64,
}

impl Default for RadiationConfig {
    fn default() -> Self {
        Self { delta: 0.8236, beta_c: 0.5 }
    }
}

/// Network settings; the input domain comes from the geometry and source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub n_f: usize,
    pub n_b: usize,
    pub fc_per_block: usize,
    pub ffe_sigma: f64,
    pub ffe_size: usize,
    /// Output scale (m³/s); `null` calibrates it from a coarse solver run.
    pub xi: Option<f64>,
    pub snake_a: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        let d = NetworkConfig::default();
        Self {
            n_f: d.n_f,
            n_b: d.n_b,
            fc_per_block: d.fc_per_block,
            ffe_sigma: d.ffe_sigma,
            ffe_size: d.ffe_size,
            xi: Some(d.xi),
            snake_a: d.snake_a,
            seed: d.seed,
            activation: d.activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Signal-to-noise ratio of the observations (dB).
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { snr_db: 40.0, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Grid points in space.
    pub nx_out: usize,
    /// Grid points in time, both period ends included.
    pub nt_out: usize,
    /// Open-end times used by TOM and the boundary comparison.
    pub tom_times: usize,
    /// Keep every n-th grid line in both directions in field CSVs.
    pub field_csv_stride: usize,
    /// Time rows evaluated per network batch.
    pub block_times: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { nx_out: 1001, nt_out: 5001, tom_times: 1000, field_csv_stride: 10, block_times: 64 }
    }
}

/// Everything that determines a run. The content hash excludes `name`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Prefix of the run directory.
    pub name: String,
    pub geometry: GeometryConfig,
    pub air: AirConfig,
    pub source: SourceConfig,
    pub radiation: RadiationConfig,
    pub fdm: FdmConfig,
    pub network: NetworkSettings,
    pub weights: LossWeights,
    pub damping: DampingVariant,
    pub collocation: CollocationConfig,
    pub training: TrainConfig,
    pub ftm: FtmConfig,
    pub noise: NoiseConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            geometry: GeometryConfig::default(),
            air: AirConfig::default(),
            source: SourceConfig::default(),
            radiation: RadiationConfig::default(),
            fdm: FdmConfig::default(),
            network: NetworkSettings::default(),
            weights: LossWeights::default(),
            damping: DampingVariant::default(),
            collocation: CollocationConfig::default(),
            training: TrainConfig::default(),
            ftm: FtmConfig::default(),
            noise: NoiseConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn period(&self) -> f64 {
        1.0 / self.source.frequency
    }

    pub fn geometry(&self) -> Result<TubeGeometry> {
        TubeGeometry::new(self.geometry.length, self.geometry.profile.clone())
    }

    pub fn air(&self) -> Result<AirProperties> {
        let a = &self.air;
        let omega = a.omega_c.unwrap_or(2.0 * PI * self.source.frequency);
        AirProperties::new(a.rho, a.c, a.mu, a.eta, a.lambda_th, a.cp, omega)
    }

    pub fn source(&self) -> Result<SourceWaveform> {
        let s = &self.source;
        if !(s.frequency.is_finite() && s.frequency > 0.0) {
            return Err(Error::Config(format!("source.frequency must be positive, got {}", s.frequency)));
        }
        let period = self.period();
        SourceWaveform::new(s.u0, period, s.tp_frac, s.tn_frac, s.smooth_width.unwrap_or(period / 200.0))
    }

    pub fn radiation(&self) -> Result<RadiationCoefficients> {
        radiation_from_taylor(self.radiation.delta, self.radiation.beta_c)
    }

    pub fn fdm_problem(&self) -> Result<FdmProblem> {
        Ok(FdmProblem {
            geometry: self.geometry()?,
            air: self.air()?,
            source: self.source()?,
            radiation: self.radiation()?,
        })
    }

    /// Network config with the given output scale.
    pub fn network_config(&self, xi: f64) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            n_f: n.n_f,
            n_b: n.n_b,
            fc_per_block: n.fc_per_block,
            ffe_sigma: n.ffe_sigma,
            ffe_size: n.ffe_size,
            xi,
            snake_a: n.snake_a,
            seed: n.seed,
            activation: n.activation,
            length: self.geometry.length,
            period: self.period(),
        }
    }

    /// Check every section without running anything expensive.
    pub fn validate(&self) -> Result<()> {
        self.fdm_problem()?;
        self.network_config(self.network.xi.unwrap_or(1.0)).validate()?;
        if let Some(xi) = self.network.xi {
            if !(xi.is_finite() && xi > 0.0) {
                return Err(Error::Config(format!("network.xi must be positive, got {xi}")));
            }
        }
        self.weights.validate()?;
        let e = &self.evaluation;
        if e.nx_out < 2 || e.nt_out < 2 || e.tom_times < 2 || e.field_csv_stride == 0 || e.block_times == 0 {
            return Err(Error::Config("evaluation grid sizes must be at least 2 and strides positive".into()));
        }
        if !self.noise.snr_db.is_finite() {
            return Err(Error::Config("noise.snr_db must be finite".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config("name must be a nonempty path component".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything but `name`, in hex.
    pub fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("name");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<root>/<name>-<first 12 hash digits>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}-{}", self.name, &self.content_hash()[..12]))
    }
}

/// Add seeded Gaussian noise at the requested SNR. Returns the noisy
/// series and the realized SNR `10 log10(P_signal / P_noise)`.
pub fn add_noise_snr(signal: &[f64], snr_db: f64, seed: u64) -> Result<(Vec<f64>, f64)> {
    let power = mean_square(signal);
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::InvalidArgument("signal has zero power".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("snr_db is NaN".into()));
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = signal.iter().map(|_| normal.sample(&mut rng)).collect();
    let realized = 10.0 * (power / mean_square(&noise)).log10();
    Ok((signal.iter().zip(&noise).map(|(s, n)| s + n).collect(), realized))
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64
}

/// Error of an estimated field against a reference on the same grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldErrorReport {
    pub rel_l2: f64,
    /// Largest absolute difference (Pa).
    pub max_abs: f64,
    /// RMS difference at each position.
    pub per_x: Vec<f64>,
    /// RMS difference at each time.
    pub per_t: Vec<f64>,
}

/// `p_hat` and `p_ref` are `[time, space]` arrays of identical shape.
pub fn field_error(p_hat: &Array2<f64>, p_ref: &Array2<f64>) -> Result<FieldErrorReport> {
    if p_hat.dim() != p_ref.dim() {
        return Err(Error::InvalidArgument(format!("field shapes differ: {:?} vs {:?}", p_hat.dim(), p_ref.dim())));
    }
    let (nt, nx) = p_ref.dim();
    let mut per_x = vec![0.0; nx];
    let mut per_t = vec![0.0; nt];
    let (mut num, mut den, mut max_abs) = (0.0, 0.0, 0.0f64);
    for ((k, i), r) in p_ref.indexed_iter() {
        let d = p_hat[[k, i]] - r;
        num += d * d;
        den += r * r;
        max_abs = max_abs.max(d.abs());
        per_x[i] += d * d;
        per_t[k] += d * d;
    }
    per_x.iter_mut().for_each(|v| *v = (*v / nt as f64).sqrt());
    per_t.iter_mut().for_each(|v| *v = (*v / nx as f64).sqrt());
    let rel_l2 = if den > 0.0 {
        (num / den).sqrt()
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(FieldErrorReport { rel_l2, max_abs, per_x, per_t })
}

/// Output scale from a coarse (101-node) solver run: the peak `|φ|`.
pub fn calibrate_xi(config: &ExperimentConfig) -> Result<f64> {
    let problem = config.fdm_problem()?;
    let coarse = FdmConfig { nx: 101, ..config.fdm.clone() };
    Ok(run_to_steady_state(&problem, &coarse)?.max_abs_phi())
}

/// Network pressure `p̂ = R A φ̂ + ρ φ̂_t` on a `[time, space]` grid,
/// evaluated `block` time rows at a time.
pub fn network_pressure_grid(
    model: &dyn FieldModel,
    air: &AirProperties,
    geom: &TubeGeometry,
    x: &[f64],
    t: &[f64],
    block: usize,
) -> Result<Array2<f64>> {
    let coef: Vec<(f64, f64)> = x.iter().map(|&xi| (loss_coefficients(air, geom, xi).0, geom.area(xi))).collect();
    let mut out = Array2::zeros((t.len(), x.len()));
    for (b, rows) in t.chunks(block.max(1)).enumerate() {
        let xs: Vec<f64> = rows.iter().flat_map(|_| x.iter().copied()).collect();
        let ts: Vec<f64> = rows.iter().flat_map(|&tk| std::iter::repeat_n(tk, x.len())).collect();
        let e = model.eval_points(&xs, &ts, ChannelSet::new(&[Channel::T]))?;
        for r in 0..rows.len() {
            for (i, &(rr, a)) in coef.iter().enumerate() {
                out[[b * block + r, i]] = e.pressure(r * x.len() + i, rr, a, air.rho);
            }
        }
    }
    Ok(out)
}

/// Coefficient comparison: ground truth and each estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    #[serde(rename = "GT")]
    pub gt: Coefficients,
    #[serde(rename = "FTM")]
    pub ftm: Option<Coefficients>,
    #[serde(rename = "TOM")]
    pub tom: Option<Coefficients>,
    #[serde(rename = "TOMB")]
    pub tomb: Option<Coefficients>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: f64,
    pub beta: f64,
}

impl From<&EstimationResult> for Coefficients {
    fn from(r: &EstimationResult) -> Self {
        Self { alpha: r.alpha_hat, beta: r.beta_hat }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seconds: f64,
    pub completed: bool,
}

/// Provenance of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub crate_version: String,
    pub network_seed: u64,
    pub noise_seed: u64,
    /// First Sobol index of the PDE points.
    pub sobol_skip: usize,
    /// Output scale actually used, calibrated or configured.
    pub xi: Option<f64>,
    pub realized_snr_db: Option<f64>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub const STAGES: [&str; 7] = ["forward", "synth-obs", "train", "evaluate", "ftm", "tom", "tomb"];

/// A run directory bound to a config. Stages can run individually; each
/// reads what earlier stages wrote. The reference solution is recomputed
/// on demand since it is deterministic.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    /// Pick up training from `gamma/` if a saved state exists.
    pub resume: bool,
    manifest: Manifest,
    fdm: Option<FdmSolution>,
}

impl Experiment {
    /// Bind `config` to `dir`, creating it and writing `config.json`.
    /// A directory holding a run of a different config is refused.
    pub fn open(config: ExperimentConfig, dir: PathBuf) -> Result<Self> {
        config.validate()?;
        let hash = config.content_hash();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let m: Manifest = read_json(&manifest_path)?;
            if m.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} holds a run with config hash {}, not {hash}",
                    dir.display(),
                    m.config_hash
                )));
            }
            m
        } else {
            Manifest {
                config_hash: hash,
                crate_version: env!("CARGO_PKG_VERSION").into(),
                network_seed: config.network.seed,
                noise_seed: config.noise.seed,
                sobol_skip: config.collocation.sobol_skip,
                xi: config.network.xi,
                realized_snr_db: None,
                stages: BTreeMap::new(),
            }
        };
        write_json(&dir.join("config.json"), &config)?;
        let exp = Self { config, dir, resume: false, manifest, fdm: None };
        exp.save_manifest()?;
        Ok(exp)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.dir.join("manifest.json"), &self.manifest)
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {stage}");
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage));
        let rec = StageRecord { seconds: start.elapsed().as_secs_f64(), completed: out.is_ok() };
        self.manifest.stages.insert(stage.into(), rec);
        self.save_manifest()?;
        out
    }

    fn solution(&mut self) -> Result<&FdmSolution> {
        if self.fdm.is_none() {
            let problem = self.config.fdm_problem()?;
            let sol = run_to_steady_state(&problem, &self.config.fdm)?;
            log::info!(
                "reference solution: {} periods, steady residual {:.2e}",
                sol.periods_run,
                sol.steady_residual_rel
            );
            self.fdm = Some(sol);
        }
        Ok(self.fdm.as_ref().expect("just computed"))
    }

    fn xi(&mut self) -> Result<f64> {
        if let Some(xi) = self.manifest.xi {
            return Ok(xi);
        }
        let xi = calibrate_xi(&self.config)?;
        log::info!("calibrated xi = {xi:.6e}");
        self.manifest.xi = Some(xi);
        self.save_manifest()?;
        Ok(xi)
    }

    /// Reference solution; writes `fdm/`.
    pub fn forward(&mut self) -> Result<()> {
        self.timed("forward", |s| {
            let out = s.subdir("fdm")?;
            let stride = s.config.evaluation.field_csv_stride;
            let sol = s.solution()?;
            let p = sol.pressure_field();
            let (times, xs) = (sol.times(), sol.positions());
            let mut w = csv_writer(&out.join("field.csv"))?;
            w.write_record(["t", "x", "phi", "p"])?;
            for k in (0..times.len()).step_by(stride) {
                for i in (0..xs.len()).step_by(stride) {
                    w.serialize((times[k], xs[i], sol.phi[[k, i]], p[[k, i]]))?;
                }
            }
            w.flush().map_err(|e| Error::io(out.join("field.csv"), e))?;
            let b = sol.native_boundary_signals();
            let mut w = csv_writer(&out.join("boundary.csv"))?;
            w.write_record(["t", "p", "p_t", "u_t"])?;
            for k in 0..b.times.len() {
                w.serialize((b.times[k], b.p[k], b.p_t[k], b.u_t[k]))?;
            }
            w.flush().map_err(|e| Error::io(out.join("boundary.csv"), e))?;
            let summary = serde_json::json!({
                "nx": sol.grid.nx,
                "steps_per_period": sol.grid.steps_per_period,
                "periods_run": sol.periods_run,
                "steady_residual_rel": sol.steady_residual_rel,
                "radiation_residual": sol.radiation_residual(),
                "max_abs_phi": sol.max_abs_phi(),
            });
            write_json(&out.join("summary.json"), &summary)
        })
    }

    /// Noisy open-end pressure observations; writes `obs/observations.csv`.
    pub fn synth_obs(&mut self) -> Result<ObservationData> {
        self.timed("synth-obs", |s| {
            let out = s.subdir("obs")?;
            let times = periodic_times(s.config.period(), s.config.collocation.n_obs);
            let clean = s.solution()?.boundary_signals(&times).p;
            let noise = s.config.noise.clone();
            let (noisy, snr) = add_noise_snr(&clean, noise.snr_db, noise.seed)?;
            let path = out.join("observations.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["t", "p_clean", "p"])?;
            for k in 0..times.len() {
                w.serialize((times[k], clean[k], noisy[k]))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            s.manifest.realized_snr_db = Some(snr);
            log::info!("observations: realized SNR {snr:.3} dB");
            Ok(ObservationData { times, pressures: noisy, snr_db: snr, noise_seed: noise.seed })
        })
    }

    fn observations(&self) -> Result<ObservationData> {
        let path = self.dir.join("obs").join("observations.csv");
        if !path.exists() {
            return Err(Error::Config(format!("{} is missing; run synth-obs first", path.display())));
        }
        let mut r = csv::Reader::from_path(&path)?;
        let (mut times, mut pressures) = (Vec::new(), Vec::new());
        for row in r.deserialize() {
            let (t, _clean, p): (f64, f64, f64) = row?;
            times.push(t);
            pressures.push(p);
        }
        Ok(ObservationData {
            times,
            pressures,
            snr_db: self.manifest.realized_snr_db.unwrap_or(self.config.noise.snr_db),
            noise_seed: self.config.noise.seed,
        })
    }

    fn loss_context(&self, params: &NetworkParams, radiation: bool) -> Result<LossContext> {
        let (geometry, air, source) = (self.config.geometry()?, self.config.air()?, self.config.source()?);
        let sets = CollocationSets::new(&self.config.collocation, geometry.length(), source.period)?;
        let setup = PhysicsSetup { geometry: &geometry, air: &air, source: &source, damping: self.config.damping };
        LossContext::new(params, &sets, &setup, &self.observations()?, radiation)
    }

    fn gamma(&self) -> Result<NetworkParams> {
        let path = self.dir.join("gamma").join("checkpoint.bin");
        if !path.exists() {
            return Err(Error::Config(format!("{} is missing; run train first", path.display())));
        }
        load_checkpoint(&path)
    }

    /// Train the field estimator; writes `gamma/`.
    pub fn train(&mut self) -> Result<TrainReport> {
        self.timed("train", |s| {
            let out = s.subdir("gamma")?;
            let xi = s.xi()?;
            let params = init_params(&s.config.network_config(xi))?;
            log::info!("network with {} trainable parameters", params.n_trainable());
            let ctx = s.loss_context(&params, false)?;
            let control = TrainControl { checkpoint_dir: Some(out.clone()), resume: s.resume, stop_after: None };
            let (trained, report) = train_gamma(params, &ctx, &s.config.weights, &s.config.training, &control)?;
            save_checkpoint(&trained, &out.join("checkpoint.bin"))?;
            report.write_csv(&out.join("train_log.csv"))?;
            write_json(&out.join("summary.json"), &report.summary())?;
            Ok(report)
        })
    }

    fn open_end(&self) -> Result<OpenEnd> {
        let (geom, air) = (self.config.geometry()?, self.config.air()?);
        let l = geom.length();
        Ok(OpenEnd {
            length: l,
            period: self.config.period(),
            r: loss_coefficients(&air, &geom, l).0,
            area: geom.area(l),
            rho: air.rho,
            c: air.c,
        })
    }

    /// Field error and open-end signal comparison; writes `eval/`.
    pub fn evaluate(&mut self) -> Result<FieldErrorReport> {
        self.timed("evaluate", |s| {
            let out = s.subdir("eval")?;
            let gamma = s.gamma()?;
            let ev = s.config.evaluation.clone();
            let (geom, air) = (s.config.geometry()?, s.config.air()?);
            let end = s.open_end()?;
            let reference = s.solution()?.resample_to_grid(ev.nx_out, ev.nt_out)?;
            let p_hat = network_pressure_grid(&gamma, &air, &geom, &reference.x, &reference.t, ev.block_times)?;
            let report = field_error(&p_hat, &reference.p)?;
            log::info!("field error: rel L2 {:.4e}, max {:.4e} Pa", report.rel_l2, report.max_abs);
            write_json(&out.join("field_error.json"), &report)?;
            let path = out.join("p_field.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["t", "x", "p_ref", "p_hat"])?;
            for k in (0..reference.t.len()).step_by(ev.field_csv_stride) {
                for i in (0..reference.x.len()).step_by(ev.field_csv_stride) {
                    w.serialize((reference.t[k], reference.x[i], reference.p[[k, i]], p_hat[[k, i]]))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let est = tom_collect_signals(&gamma, &end, ev.tom_times)?;
            let refs = s.solution()?.boundary_signals(&est.times);
            let path = out.join("boundary.csv");
            let mut w = csv_writer(&path)?;
            w.write_record(["t", "p_ref", "p_hat", "p_t_ref", "p_t_hat", "u_t_ref", "u_t_hat"])?;
            for k in 0..est.times.len() {
                w.serialize((est.times[k], refs.p[k], est.p[k], refs.p_t[k], est.p_t[k], refs.u_t[k], est.u_t[k]))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(report)
        })
    }

    fn ground_truth(&self) -> Result<[f64; 2]> {
        let r = self.config.radiation()?;
        Ok([r.alpha, r.beta])
    }

    /// Fine-tune the trained estimator with trainable `(α, β)`.
    pub fn ftm(&mut self) -> Result<EstimationResult> {
        self.timed("ftm", |s| {
            let out = s.subdir("inverse")?;
            let gamma = s.gamma()?;
            let ctx = s.loss_context(&gamma, true)?;
            let outcome = ftm_train(&gamma, &ctx, &s.config.weights, &s.config.ftm)?;
            let trace_path = out.join("ftm_trace.csv");
            write_trace_csv(&outcome.trace, &trace_path)?;
            save_checkpoint(&outcome.params, &out.join("ftm_checkpoint.bin"))?;
            let [a, b] = s.ground_truth()?;
            let result = EstimationResult { trace_csv_path: Some("inverse/ftm_trace.csv".into()), ..outcome.result }
                .with_ground_truth(a, b);
            write_json(&out.join("ftm.json"), &result)?;
            Ok(result)
        })
    }

    /// Unconstrained-network least squares on the trained estimator's
    /// open-end signals.
    pub fn tom(&mut self) -> Result<EstimationResult> {
        self.timed("tom", |s| {
            let out = s.subdir("inverse")?;
            let gamma = s.gamma()?;
            let problem = tom_collect_signals(&gamma, &s.open_end()?, s.config.evaluation.tom_times)?;
            let [a, b] = s.ground_truth()?;
            let result = tom_fit(&problem)?.with_ground_truth(a, b);
            write_json(&out.join("tom.json"), &result)?;
            Ok(result)
        })
    }

    /// Least squares on the reference solver's open-end signals.
    pub fn tomb(&mut self) -> Result<EstimationResult> {
        self.timed("tomb", |s| {
            let out = s.subdir("inverse")?;
            let [a, b] = s.ground_truth()?;
            let result = tomb_fit(s.solution()?)?.with_ground_truth(a, b);
            write_json(&out.join("tomb.json"), &result)?;
            Ok(result)
        })
    }

    /// Assemble `table2.json` from whatever estimates exist.
    pub fn table2(&self) -> Result<Table2> {
        let [alpha, beta] = self.ground_truth()?;
        let load = |name: &str| -> Result<Option<Coefficients>> {
            let path = self.dir.join("inverse").join(name);
            if !path.exists() {
                return Ok(None);
            }
            let r: EstimationResult = read_json(&path)?;
            Ok(Some((&r).into()))
        };
        let table = Table2 {
            gt: Coefficients { alpha, beta },
            ftm: load("ftm.json")?,
            tom: load("tom.json")?,
            tomb: load("tomb.json")?,
        };
        write_json(&self.dir.join("table2.json"), &table)?;
        Ok(table)
    }

    pub fn completed(&self, stage: &str) -> bool {
        self.manifest.stages.get(stage).is_some_and(|r| r.completed)
    }

    /// Like [`Experiment::run_all`] but skips stages the manifest records
    /// as completed, so an interrupted run picks up where it stopped.
    pub fn run_pending(&mut self) -> Result<Table2> {
        for stage in STAGES {
            if self.completed(stage) {
                continue;
            }
            match stage {
                "forward" => self.forward()?,
                "synth-obs" => drop(self.synth_obs()?),
                "train" => drop(self.train()?),
                "evaluate" => drop(self.evaluate()?),
                "ftm" => drop(self.ftm()?),
                "tom" => drop(self.tom()?),
                _ => drop(self.tomb()?),
            }
        }
        self.table2()
    }

    /// Every stage in order, then the coefficient table.
    pub fn run_all(&mut self) -> Result<Table2> {
        self.forward()?;
        self.synth_obs()?;
        self.train()?;
        self.evaluate()?;
        self.tomb()?;
        self.tom()?;
        self.ftm()?;
        self.table2()
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize) -> Vec<f64> {
        (0..n).map(|k| (2.0 * PI * k as f64 / n as f64).sin() + 0.3).collect()
    }

    #[test]
    fn vanishing_noise_is_identity() {
        let s = sine(500);
        let (noisy, _) = add_noise_snr(&s, 300.0, 7).unwrap();
        for (a, b) in noisy.iter().zip(&s) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn realized_snr_near_target() {
        let (noisy, snr) = add_noise_snr(&sine(1000), 40.0, 1).unwrap();
        assert!((snr - 40.0).abs() <= 0.5, "{snr}");
        let noise: Vec<f64> = noisy.iter().zip(sine(1000)).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (mean_square(&sine(1000)) / mean_square(&noise)).log10();
        assert!((measured - snr).abs() < 1e-9);
    }

    #[test]
    fn noise_variance_converges() {
        let s = vec![1.0; 100_000];
        let (noisy, _) = add_noise_snr(&s, 20.0, 3).unwrap();
        let target = 0.01;
        for n in [1_000, 100_000] {
            let var = noisy[..n].iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n as f64;
            // 4 standard errors of the sample variance
            let bound = 4.0 * target * (2.0 / n as f64).sqrt();
            assert!((var - target).abs() < bound, "n={n} var={var}");
        }
    }

    #[test]
    fn noise_is_seeded() {
        let s = sine(200);
        assert_eq!(add_noise_snr(&s, 40.0, 5).unwrap(), add_noise_snr(&s, 40.0, 5).unwrap());
        assert_ne!(add_noise_snr(&s, 40.0, 5).unwrap().0, add_noise_snr(&s, 40.0, 6).unwrap().0);
    }

    #[test]
    fn zero_power_rejected() {
        assert!(matches!(add_noise_snr(&[0.0; 10], 40.0, 1), Err(Error::InvalidArgument(_))));
        assert!(add_noise_snr(&[], 40.0, 1).is_err());
    }

    fn grid() -> Array2<f64> {
        Array2::from_shape_fn((7, 5), |(k, i)| (k as f64 * 0.7).sin() * (1.0 + i as f64))
    }

    #[test]
    fn field_error_examples() {
        let r = grid();
        let e = field_error(&r, &r).unwrap();
        assert_eq!((e.rel_l2, e.max_abs), (0.0, 0.0));
        let e = field_error(&(&r * 1.01), &r).unwrap();
        assert!((e.rel_l2 - 0.01).abs() < 1e-14);
        let e = field_error(&(&r + 0.25), &r).unwrap();
        assert!((e.max_abs - 0.25).abs() < 1e-15);
        assert!(e.per_x.iter().chain(&e.per_t).all(|v| (v - 0.25).abs() < 1e-15));
        assert!(field_error(&Array2::zeros((7, 4)), &r).is_err());
    }

    #[test]
    fn config_hash_ignores_name_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { name: "other".into(), ..a.clone() };
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
        let mut c = a.clone();
        c.noise.seed += 1;
        assert_ne!(a.content_hash(), c.content_hash());
        assert!(a.run_dir(Path::new("runs")).ends_with(format!("run-{}", &a.content_hash()[..12])));
    }

    #[test]
    fn config_json_round_trip() {
        let a = ExperimentConfig::default();
        let text = serde_json::to_string(&a).unwrap();
        let b: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"noise": {"snr_db": 30}}"#).unwrap();
        assert_eq!(partial.noise.snr_db, 30.0);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"nosie": {}}"#).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert!((c.air().unwrap().omega_c - 2.0 * PI * 261.6).abs() < 1e-9);
        let r = c.radiation().unwrap();
        assert!((r.alpha - 1.2142).abs() < 5e-5 && (r.beta - 0.7371).abs() < 5e-5);
        let bad = ExperimentConfig { name: "a/b".into(), ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pressure_grid_matches_pointwise() {
        let cfg = NetworkConfig { n_f: 8, n_b: 1, ffe_size: 2, ffe_sigma: 1.0, ..Default::default() };
        let params = init_params(&cfg).unwrap();
        let geom = TubeGeometry::uniform(1.0, 0.02).unwrap();
        let air = AirProperties::standard(2.0 * PI * 261.6);
        let x = crate::fdm::uniform_nodes(1.0, 5);
        let t = crate::fdm::uniform_nodes(cfg.period, 9);
        let grid = network_pressure_grid(&params, &air, &geom, &x, &t, 4).unwrap();
        for (k, &tk) in t.iter().enumerate() {
            for (i, &xi) in x.iter().enumerate() {
                let e = params.eval_points(&[xi], &[tk], ChannelSet::new(&[Channel::T])).unwrap();
                let (r, a) = (loss_coefficients(&air, &geom, xi).0, geom.area(xi));
                assert_eq!(grid[[k, i]], e.pressure(0, r, a, air.rho));
            }
        }
    }
}
